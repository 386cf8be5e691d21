use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod runlog;

#[derive(Parser, Debug)]
#[command(name = "wheatvit", version, about = "Self-supervised ViT pretraining, distillation, frozen-backbone heads and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the training commands.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's top-level `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the command's step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-supervised pretraining; writes per-epoch and final checkpoints.
    Pretrain(RunArgs),
    /// Distil a frozen teacher checkpoint into a smaller student.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Train a task head on a frozen backbone and evaluate it on the test split.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Backbone checkpoint; a freshly initialised backbone when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        /// Fraction of the training split per resample.
        #[arg(long)]
        fraction: Option<f64>,
        /// Number of random training subsets.
        #[arg(long)]
        resamples: Option<u64>,
    },
    /// Metrics from prediction and ground-truth files only.
    Eval {
        #[arg(long)]
        task: String,
        /// Prediction file (a directory of label maps for segmentation).
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        num_classes: Option<usize>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the top three principal components of patch features as RGB.
    Pca {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input images; the configured dataset when omitted.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// One basis across all images.
        #[arg(long)]
        corpus: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate and export a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Pretrain(run) => commands::pretrain(&run),
        Command::Distill { run, teacher } => commands::distill(&run, &teacher),
        Command::Finetune {
            run,
            checkpoint,
            task,
            fraction,
            resamples,
        } => commands::finetune(&run, checkpoint.as_deref(), task.as_deref(), fraction, resamples),
        Command::Eval {
            task,
            pred,
            gt,
            num_classes,
            out,
        } => commands::eval(&task, &pred, gt.as_deref(), num_classes, out.as_deref()),
        Command::Pca {
            checkpoint,
            images,
            config,
            corpus,
            out,
        } => commands::pca(&checkpoint, &images, config.as_deref(), corpus, &out),
        Command::GenData { config, seed, out } => commands::gen_data(config.as_deref(), seed, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // configuration problems share clap's usage exit code
            let usage = matches!(
                e.downcast_ref::<wheatvit::Error>(),
                Some(wheatvit::Error::Config(_) | wheatvit::Error::Parse { .. } | wheatvit::Error::Usage(_))
            );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

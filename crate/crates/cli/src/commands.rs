use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use wheatvit::adapter::Adapter;
use wheatvit::backbone::{Backbone, Features};
use wheatvit::checkpoint::Checkpoint;
use wheatvit::config::RunConfig;
use wheatvit::datagen::{export_dataset, gen_blobworld, load_dataset, LabeledSample, Split};
use wheatvit::distill::{student_config, DistillJob};
use wheatvit::heads::{
    batch_indices, format_reduced_table, subset_indices, ClassifierHead, CountHead, DetectModel, FinetuneConfig,
    FinetuneReport, ReducedDataRow, SegmentModel,
};
use wheatvit::image::Image;
use wheatvit::metrics::io::{evaluate_files, format_classification, format_counts, format_detections, format_ground_truth_boxes, write_label_map, ClassificationRecord};
use wheatvit::metrics::{AccuracyMode, MetricReport, TaskKind};
use wheatvit::pca::{pca_corpus, Pca};
use wheatvit::ssl::{Pretrainer, SslModel};
use wheatvit::tensor::ParamStore;
use wheatvit::{Error, Exec};

use crate::runlog::RunLog;
use crate::RunArgs;

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Apply `--seed`/`--steps` style overrides, revalidate, create the output
/// directory and archive the effective config there.
fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

/// Generated samples (`count + extra` of them) or the exported directory.
fn samples(cfg: &RunConfig, extra: usize) -> Result<Vec<LabeledSample>> {
    Ok(match &cfg.data.dir {
        Some(dir) => load_dataset(dir)?,
        None => gen_blobworld(&cfg.data.blobworld, cfg.data.seed, cfg.data.count + extra, Exec::default())?,
    })
}

fn pretrain_checkpoint(t: &Pretrainer, cfg: &RunConfig) -> Checkpoint {
    let mut c = Checkpoint::new(
        "pretrain",
        json!({
            "teacher_model": t.teacher.backbone.config,
            "teacher_head": t.teacher.cls_head.config,
            "student_model": t.student.backbone.config,
            "student_head": t.student.cls_head.config,
            "run": cfg,
        }),
        json!({ "step": t.step, "total_steps": t.total_steps, "seed": cfg.seed }),
    );
    c.add_ssl("teacher", &t.teacher).add_ssl("student", &t.student);
    c
}

pub fn pretrain(run: &RunArgs) -> Result<()> {
    let mut cfg = load_config(run.config.as_deref())?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(s) = run.steps {
        cfg.pretrain.steps = s;
    }
    prepare(&cfg, &run.out)?;
    let images: Vec<Image> = samples(&cfg, 0)?.into_iter().map(|s| s.image).collect();
    let p = &cfg.pretrain;
    let mut trainer = Pretrainer::new(cfg.model.resolve()?, p.ssl.clone(), cfg.seed, p.steps)?;
    let mut log = RunLog::open(&run.out.join("log.jsonl"), "pretrain")?;
    let per_epoch = images.len().div_ceil(p.batch);
    for step in 0..p.steps {
        trainer.config.aug.global_size = p.global_size_at(step);
        let batch: Vec<Image> = batch_indices(images.len(), p.batch, step, cfg.seed)
            .into_iter()
            .map(|i| images[i].clone())
            .collect();
        let stats = trainer.step_images(&batch, cfg.seed)?;
        let mut rec = serde_json::to_value(&stats)?;
        rec["global_size"] = json!(trainer.config.aug.global_size);
        log.record(rec)?;
        if (step + 1) % per_epoch == 0 && p.checkpoint_every > 0 && ((step + 1) / per_epoch) % p.checkpoint_every == 0 {
            let path = run.out.join("checkpoints").join(format!("epoch-{:04}.fmw", (step + 1) / per_epoch));
            pretrain_checkpoint(&trainer, &cfg).save(&path)?;
        }
    }
    let path = run.out.join("pretrain.fmw");
    pretrain_checkpoint(&trainer, &cfg).save(&path)?;
    log.record(json!({ "done": true, "steps": trainer.step, "checkpoint": "pretrain.fmw", "teacher_checksum": trainer.teacher.checksum() }))?;
    println!("pretrained {} steps -> {}", trainer.step, path.display());
    Ok(())
}

/// The frozen teacher: a pretraining checkpoint's teacher, or the student of
/// an earlier distillation.
fn load_teacher(path: &Path) -> Result<SslModel> {
    let c = Checkpoint::load(path)?;
    c.expect_kind(&["pretrain", "distill"])?;
    let prefix = if c.has_group("teacher.backbone") { "teacher" } else { "student" };
    Ok(c.ssl_model(prefix)?)
}

pub fn distill(run: &RunArgs, teacher_path: &Path) -> Result<()> {
    let mut cfg = load_config(run.config.as_deref())?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(s) = run.steps {
        cfg.distill.steps = s;
    }
    prepare(&cfg, &run.out)?;
    let d = cfg.distill.clone();
    let all = samples(&cfg, d.holdout)?;
    let (train, held): (Vec<Image>, Vec<Image>) = if cfg.data.dir.is_some() {
        let split = |sp: Split| all.iter().filter(|s| s.split == sp).map(|s| s.image.clone()).collect::<Vec<_>>();
        let mut h = split(Split::Test);
        h.truncate(d.holdout);
        (split(Split::Train), h)
    } else {
        let imgs: Vec<Image> = all.into_iter().map(|s| s.image).collect();
        let (a, b) = imgs.split_at(cfg.data.count);
        (a.to_vec(), b.to_vec())
    };
    if train.is_empty() {
        bail!("no training images for distillation");
    }
    let teacher = load_teacher(teacher_path)?;
    let sc = student_config(&teacher.backbone.config, d.embed_dim, d.num_heads, d.num_blocks);
    let mut job = DistillJob::new(teacher, sc, d.config.clone(), cfg.seed, d.steps)?;
    let before = job.teacher.checksum();
    let mut log = RunLog::open(&run.out.join("log.jsonl"), "distill")?;
    let per_epoch = train.len().div_ceil(d.batch);
    let evaluate = |job: &DistillJob, log: &mut RunLog| -> Result<()> {
        if !held.is_empty() {
            log.record(json!({ "eval": true, "step": job.step, "kl": job.kl(&held)?, "agreement": job.agreement(&held)? }))?;
        }
        Ok(())
    };
    evaluate(&job, &mut log)?;
    for step in 0..d.steps {
        let batch: Vec<Image> = batch_indices(train.len(), d.batch, step, cfg.seed)
            .into_iter()
            .map(|i| train[i].clone())
            .collect();
        let stats = job.step_images(&batch, cfg.seed)?;
        log.record(serde_json::to_value(&stats)?)?;
        if (step + 1) % d.eval_every == 0 {
            evaluate(&job, &mut log)?;
        }
        if (step + 1) % per_epoch == 0 && d.checkpoint_every > 0 && ((step + 1) / per_epoch) % d.checkpoint_every == 0 {
            let path = run.out.join("checkpoints").join(format!("epoch-{:04}.fmw", (step + 1) / per_epoch));
            distill_checkpoint(&job, &cfg, &before).save(&path)?;
        }
    }
    if job.teacher.checksum() != before {
        return Err(Error::Contract("teacher parameters changed during distillation".into()).into());
    }
    let path = run.out.join("distill.fmw");
    distill_checkpoint(&job, &cfg, &before).save(&path)?;
    log.record(json!({ "done": true, "steps": job.step, "checkpoint": "distill.fmw", "teacher_checksum": before }))?;
    println!("distilled {} steps -> {}", job.step, path.display());
    Ok(())
}

fn distill_checkpoint(job: &DistillJob, cfg: &RunConfig, teacher_checksum: &str) -> Checkpoint {
    let mut c = Checkpoint::new(
        "distill",
        json!({
            "student_model": job.student.backbone.config,
            "student_head": job.student.cls_head.config,
            "teacher_model": job.teacher.backbone.config,
            "run": cfg,
        }),
        json!({ "step": job.step, "total_steps": job.total_steps, "seed": cfg.seed, "teacher_checksum": teacher_checksum }),
    );
    c.add_ssl("student", &job.student);
    c
}

/// Head, its adapter if any, and the metadata needed to rebuild both.
fn head_checkpoint(task: TaskKind, classes: usize, cfg: &RunConfig, backbone: &Backbone, head: &ParamStore, adapter: Option<&Adapter>) -> Checkpoint {
    let mut c = Checkpoint::new(
        "head",
        json!({
            "task": task,
            "num_classes": classes,
            "features": cfg.finetune.features,
            "adapter": adapter.map(|a| &a.config),
            "model": backbone.config,
            "run": cfg,
        }),
        json!({ "backbone_checksum": backbone.checksum() }),
    );
    c.add_group("head", head);
    if let Some(a) = adapter {
        c.add_group("adapter", &a.params);
    }
    c
}

/// Everything one finetune-and-evaluate run needs.
struct Task<'a> {
    kind: TaskKind,
    cfg: &'a RunConfig,
    backbone: &'a Backbone,
    train: Vec<&'a LabeledSample>,
    test: Vec<&'a LabeledSample>,
    /// Frozen features for the linear heads.
    feats: Option<(Vec<Features>, Vec<Features>)>,
    classes: usize,
}

impl Task<'_> {
    fn primary_metric(&self) -> &'static str {
        match self.kind {
            TaskKind::Classification => "ba",
            TaskKind::Segmentation => "miou",
            TaskKind::Counting => "r2",
            TaskKind::Detection => "ap50",
        }
    }

    /// Train on `idx` of the training split, write predictions, checkpoint
    /// and report into `dir`.
    fn run(&self, idx: &[usize], train_cfg: &FinetuneConfig, dir: &Path) -> Result<(MetricReport, FinetuneReport)> {
        fs::create_dir_all(dir)?;
        let exec = Exec::default();
        let bb = self.backbone;
        let train: Vec<&LabeledSample> = idx.iter().map(|&i| self.train[i]).collect();
        let acc = AccuracyMode::default();
        let (fit, report) = match self.kind {
            TaskKind::Classification => {
                let (ftr, fte) = self.feats.as_ref().expect("features computed");
                let mut head = ClassifierHead::new(bb.config.embed_dim, self.classes, self.cfg.finetune.features)?;
                let x: Vec<Vec<f64>> = idx.iter().map(|&i| head.features.extract(&ftr[i])).collect();
                let y: Vec<usize> = train.iter().map(|s| s.scene_class).collect();
                let fit = head.fit(bb, &x, &y, train_cfg, exec)?;
                let recs = self
                    .test
                    .iter()
                    .zip(fte)
                    .map(|(s, f)| {
                        Ok(ClassificationRecord {
                            sample_id: s.id.clone(),
                            scores: head.probs_from_features(&head.features.extract(f))?,
                            label: s.scene_class,
                        })
                    })
                    .collect::<Result<Vec<_>, Error>>()?;
                let pred = dir.join("predictions.txt");
                fs::write(&pred, format_classification(&recs))?;
                head_checkpoint(self.kind, self.classes, self.cfg, bb, &head.params, None).save(&dir.join("head.fmw"))?;
                (fit, evaluate_files(self.kind, &pred, None, Some(self.classes), acc)?)
            }
            TaskKind::Counting => {
                let (ftr, fte) = self.feats.as_ref().expect("features computed");
                let mut head = CountHead::new(bb.config.embed_dim);
                let f: Vec<Features> = idx.iter().map(|&i| ftr[i].clone()).collect();
                let pts: Vec<Vec<[f64; 2]>> = train.iter().map(|s| s.points.clone()).collect();
                let fit = head.fit(bb, &f, &pts, train_cfg, exec)?;
                let mut pred = Vec::new();
                for (s, f) in self.test.iter().zip(fte) {
                    let d = head.density_from_features(f)?;
                    pred.push((s.id.as_str(), d.iter().sum::<f64>()));
                }
                let (pp, gp) = (dir.join("predictions.txt"), dir.join("ground_truth.txt"));
                fs::write(&pp, format_counts(pred))?;
                fs::write(&gp, format_counts(self.test.iter().map(|s| (s.id.as_str(), s.count() as f64))))?;
                head_checkpoint(self.kind, 1, self.cfg, bb, &head.params, None).save(&dir.join("head.fmw"))?;
                (fit, evaluate_files(self.kind, &pp, Some(&gp), None, acc)?)
            }
            TaskKind::Segmentation => {
                let adapter = Adapter::new(self.cfg.finetune.adapter.clone(), bb, self.cfg.finetune.adapter_seed)?;
                let mut model = SegmentModel::new(adapter, self.classes)?;
                let imgs: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
                let masks: Vec<Vec<usize>> = train.iter().map(|s| s.mask.clone()).collect();
                let fit = model.fit(bb, &imgs, &masks, train_cfg, exec)?;
                let test_imgs: Vec<Image> = self.test.iter().map(|s| s.image.clone()).collect();
                let maps = model.segment_batch(bb, &test_imgs, exec)?;
                let (pd, gd) = (dir.join("pred_masks"), dir.join("gt_masks"));
                fs::create_dir_all(&pd)?;
                fs::create_dir_all(&gd)?;
                for (s, m) in self.test.iter().zip(&maps) {
                    let (w, h) = (s.image.width(), s.image.height());
                    write_label_map(&pd.join(format!("{}.png", s.id)), w, h, m)?;
                    write_label_map(&gd.join(format!("{}.png", s.id)), w, h, &s.mask)?;
                }
                head_checkpoint(self.kind, self.classes, self.cfg, bb, &model.params, Some(&model.adapter)).save(&dir.join("head.fmw"))?;
                (fit, evaluate_files(self.kind, &pd, Some(&gd), Some(self.classes), acc)?)
            }
            TaskKind::Detection => {
                let adapter = Adapter::new(self.cfg.finetune.adapter.clone(), bb, self.cfg.finetune.adapter_seed)?;
                let mut model = DetectModel::new(adapter, self.classes)?;
                let imgs: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
                let boxes: Vec<_> = train.iter().map(|s| s.boxes.clone()).collect();
                let fit = model.fit(bb, &imgs, &boxes, train_cfg, exec)?;
                let test_imgs: Vec<Image> = self.test.iter().map(|s| s.image.clone()).collect();
                let ft = &self.cfg.finetune;
                let found = model.detect_batch(bb, &test_imgs, ft.score_thresh, ft.nms_iou, exec)?;
                let dets: Vec<_> = self
                    .test
                    .iter()
                    .zip(&found)
                    .flat_map(|(s, f)| f.iter().map(|b| b.to_detection(&s.id)))
                    .collect();
                let gts: Vec<_> = self.test.iter().flat_map(|s| s.ground_truth_boxes()).collect();
                let (pp, gp) = (dir.join("detections.txt"), dir.join("ground_truth.txt"));
                fs::write(&pp, format_detections(&dets))?;
                fs::write(&gp, format_ground_truth_boxes(&gts))?;
                head_checkpoint(self.kind, self.classes, self.cfg, bb, &model.params, Some(&model.adapter)).save(&dir.join("head.fmw"))?;
                (fit, evaluate_files(self.kind, &pp, Some(&gp), None, acc)?)
            }
        };
        fs::write(dir.join("report.json"), report.to_json())?;
        Ok((report, fit))
    }
}

pub fn finetune(run: &RunArgs, checkpoint: Option<&Path>, task: Option<&str>, fraction: Option<f64>, resamples: Option<u64>) -> Result<()> {
    let mut cfg = load_config(run.config.as_deref())?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(s) = run.steps {
        cfg.finetune.train.steps = s;
    }
    if let Some(t) = task {
        cfg.finetune.task = t.parse()?;
    }
    if let Some(f) = fraction {
        cfg.finetune.fraction = f;
    }
    if let Some(r) = resamples {
        cfg.finetune.resamples = r;
    }
    prepare(&cfg, &run.out)?;
    let mut backbone = match checkpoint {
        Some(p) => Checkpoint::load(p)?.backbone()?,
        None => Backbone::new(cfg.model.resolve()?, cfg.seed)?,
    };
    backbone.freeze();
    let all = samples(&cfg, 0)?;
    let train: Vec<&LabeledSample> = all.iter().filter(|s| s.split == Split::Train).collect();
    let test: Vec<&LabeledSample> = all.iter().filter(|s| s.split == Split::Test).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "`data`: need both splits, got {} train and {} test samples; raise `data.count` or adjust `data.blobworld.test_permille`",
            train.len(),
            test.len()
        ))
        .into());
    }
    let kind = cfg.finetune.task;
    let bw = &cfg.data.blobworld;
    let classes = match kind {
        TaskKind::Classification => all.iter().map(|s| s.scene_class + 1).max().unwrap_or(0).max(bw.scene_classes).max(2),
        TaskKind::Segmentation => all.iter().flat_map(|s| s.mask.iter().map(|m| m + 1)).max().unwrap_or(0).max(bw.blob_classes + 1),
        TaskKind::Detection => all.iter().flat_map(|s| s.boxes.iter().map(|b| b.1 + 1)).max().unwrap_or(0).max(bw.blob_classes),
        TaskKind::Counting => 1,
    };
    let feats = match kind {
        TaskKind::Classification | TaskKind::Counting => {
            let enc = |v: &[&LabeledSample]| backbone.encode_batch(&v.iter().map(|s| s.image.clone()).collect::<Vec<_>>(), Exec::default());
            Some((enc(&train)?, enc(&test)?))
        }
        _ => None,
    };
    let t = Task {
        kind,
        cfg: &cfg,
        backbone: &backbone,
        train,
        test,
        feats,
        classes,
    };
    let metric = t.primary_metric();
    let mut log = RunLog::open(&run.out.join("log.jsonl"), "finetune")?;
    let ft = &cfg.finetune;
    let mut values = Vec::new();
    for s in 0..ft.resamples {
        let idx = subset_indices(t.train.len(), ft.fraction, s)?;
        let train_cfg = FinetuneConfig {
            seed: ft.train.seed.wrapping_add(cfg.seed).wrapping_add(s),
            ..ft.train.clone()
        };
        let (report, fit) = t.run(&idx, &train_cfg, &run.out.join(format!("resample-{s}")))?;
        for (step, loss) in fit.losses.iter().enumerate() {
            log.record(json!({ "resample": s, "step": step, "loss": loss }))?;
        }
        if fit.backbone_before != fit.backbone_after {
            return Err(Error::Contract("backbone changed during finetuning".into()).into());
        }
        let value = report
            .get(metric)
            .with_context(|| format!("resample {s}: `{metric}` undefined ({})", report.notes.join("; ")))?;
        log.record(json!({ "resample": s, "train_size": idx.len(), "metric": metric, "value": value, "metrics": report.metrics }))?;
        values.push(value);
    }
    let rows = [ReducedDataRow { fraction: ft.fraction, values }];
    let table = format_reduced_table(metric, &rows);
    fs::write(run.out.join("summary.txt"), &table)?;
    print!("{} on {} test images, {} resample(s)\n{table}", kind.as_str(), t.test.len(), ft.resamples);
    Ok(())
}

pub fn eval(task: &str, pred: &Path, gt: Option<&Path>, num_classes: Option<usize>, out: Option<&Path>) -> Result<()> {
    let kind: TaskKind = task.parse()?;
    let report = evaluate_files(kind, pred, gt, num_classes, AccuracyMode::default())?;
    let text = report.to_json();
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

pub fn pca(checkpoint: &Path, images: &[PathBuf], config: Option<&Path>, corpus: bool, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let backbone = Checkpoint::load(checkpoint)?.backbone()?;
    let named: Vec<(String, Image)> = if images.is_empty() {
        samples(&cfg, 0)?.into_iter().map(|s| (s.id, s.image)).collect()
    } else {
        images
            .iter()
            .map(|p| {
                let stem = p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
                Ok((stem, Image::load(p)?))
            })
            .collect::<Result<_, Error>>()?
    };
    prepare(&cfg, out)?;
    let mut log = RunLog::open(&out.join("log.jsonl"), "pca")?;
    let imgs: Vec<Image> = named.iter().map(|(_, i)| i.clone()).collect();
    if corpus || cfg.pca.corpus {
        let (basis, maps) = pca_corpus(&backbone, &imgs, Exec::default())?;
        log.record(json!({ "corpus": true, "images": imgs.len(), "variance": &basis.variances[..3] }))?;
        for ((name, _), m) in named.iter().zip(&maps) {
            m.save_png(&out.join(format!("{name}.png")))?;
        }
    } else {
        for (name, img) in &named {
            let f = backbone.encode(img)?;
            let basis = Pca::fit(&f.patches)?;
            basis.render(&f, img.height(), img.width())?.save_png(&out.join(format!("{name}.png")))?;
            log.record(json!({ "image": name, "variance": &basis.variances[..3] }))?;
        }
    }
    println!("wrote {} PCA map(s) to {}", named.len(), out.display());
    Ok(())
}

pub fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    prepare(&cfg, out)?;
    let samples = gen_blobworld(&cfg.data.blobworld, cfg.data.seed, cfg.data.count, Exec::default())?;
    export_dataset(&samples, out)?;
    let test = samples.iter().filter(|s| s.split == Split::Test).count();
    RunLog::open(&out.join("log.jsonl"), "gen-data")?.record(json!({ "seed": cfg.data.seed, "count": samples.len(), "train": samples.len() - test, "test": test }))?;
    println!("exported {} samples ({} test) to {}", samples.len(), test, out.display());
    Ok(())
}

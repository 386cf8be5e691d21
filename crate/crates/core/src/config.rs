//! Versioned TOML run configuration shared by every command.
//!
//! Unknown keys are rejected everywhere, so a typo fails loudly with the
//! offending field and line instead of silently falling back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::backbone::{FfnKind, ModelConfig, Preset};
use crate::datagen::BlobWorldConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::heads::{FeatureMode, FinetuneConfig};
use crate::metrics::TaskKind;
use crate::ssl::SslConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// A preset with optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub embed_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub num_blocks: Option<usize>,
    pub ffn_kind: Option<FfnKind>,
    pub patch_size: Option<usize>,
    pub drop_rate: Option<f64>,
    pub image_size: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            embed_dim: None,
            num_heads: None,
            num_blocks: None,
            ffn_kind: None,
            patch_size: None,
            drop_rate: None,
            image_size: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(self.preset);
        if let Some(v) = self.embed_dim {
            m.embed_dim = v;
        }
        if let Some(v) = self.num_heads {
            m.num_heads = v;
        }
        if let Some(v) = self.num_blocks {
            m.num_blocks = v;
        }
        if let Some(v) = self.ffn_kind {
            m.ffn_kind = v;
        }
        if let Some(v) = self.patch_size {
            m.patch_size = v;
        }
        if let Some(v) = self.drop_rate {
            m.drop_rate = v;
        }
        if let Some(v) = self.image_size {
            m.image_size = v;
        }
        m.validate().map_err(|e| field("model", e))?;
        Ok(m)
    }
}

/// Training images: generated on the fly, or an exported dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `gen-data`; overrides the generator when set.
    pub dir: Option<PathBuf>,
    pub seed: u64,
    pub count: usize,
    pub blobworld: BlobWorldConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            seed: 1,
            count: 16,
            blobworld: BlobWorldConfig::default(),
        }
    }
}

/// From `from_step` on, global crops use `global_size` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionStage {
    pub from_step: usize,
    pub global_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Later stages switch the global crop size; the positional table is
    /// resampled to each new grid.
    pub stages: Vec<ResolutionStage>,
    pub ssl: SslConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 8,
            checkpoint_every: 1,
            stages: Vec::new(),
            ssl: SslConfig::default(),
        }
    }
}

impl PretrainSection {
    /// Global crop size at `step`.
    pub fn global_size_at(&self, step: usize) -> usize {
        self.stages
            .iter()
            .rev()
            .find(|s| s.from_step <= step)
            .map_or(self.ssl.aug.global_size, |s| s.global_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub steps: usize,
    pub batch: usize,
    pub checkpoint_every: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Held-out KL and agreement are logged every this many steps.
    pub eval_every: usize,
    /// Images after the training set used for the held-out evaluation.
    pub holdout: usize,
    pub config: DistillConfig,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 8,
            checkpoint_every: 1,
            embed_dim: 16,
            num_heads: 2,
            num_blocks: 1,
            eval_every: 50,
            holdout: 8,
            config: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub task: TaskKind,
    /// Fraction of the training split used per resample.
    pub fraction: f64,
    pub resamples: u64,
    pub features: FeatureMode,
    pub adapter: AdapterConfig,
    pub adapter_seed: u64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub train: FinetuneConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            task: TaskKind::Classification,
            fraction: 1.0,
            resamples: 1,
            features: FeatureMode::Cls,
            adapter: AdapterConfig::default(),
            adapter_seed: 1,
            score_thresh: 0.3,
            nms_iou: 0.5,
            train: FinetuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSection {
    /// Fit one basis over the patches of every image instead of per image.
    pub corpus: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub distill: DistillSection,
    pub finetune: FinetuneSection,
    pub pca: PcaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            distill: DistillSection::default(),
            finetune: FinetuneSection::default(),
            pca: PcaSection::default(),
        }
    }
}

fn field(name: &str, e: Error) -> Error {
    let msg = match e {
        Error::Config(m) | Error::Validation(m) => m,
        other => other.to_string(),
    };
    Error::Config(format!("`{name}`: {msg}"))
}

impl RunConfig {
    pub fn from_toml(path: &Path, text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(path, &text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Every section checked; errors name the failing field.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "`schema_version`: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        let model = self.model.resolve()?;
        if self.data.count == 0 && self.data.dir.is_none() {
            return Err(Error::Config("`data.count`: must be at least 1".into()));
        }
        self.data.blobworld.validate().map_err(|e| field("data.blobworld", e))?;
        let p = &self.pretrain;
        if p.batch == 0 {
            return Err(Error::Config("`pretrain.batch`: must be at least 1".into()));
        }
        p.ssl.validate(&model).map_err(|e| field("pretrain.ssl", e))?;
        for (i, s) in p.stages.iter().enumerate() {
            let mut aug = p.ssl.aug.clone();
            aug.global_size = s.global_size;
            aug.validate(model.patch_size)
                .map_err(|e| field(&format!("pretrain.stages[{i}]"), e))?;
            if i > 0 && s.from_step <= p.stages[i - 1].from_step {
                return Err(Error::Config(format!("`pretrain.stages[{i}].from_step`: stages must start at increasing steps")));
            }
        }
        let d = &self.distill;
        if d.batch == 0 || d.eval_every == 0 {
            return Err(Error::Config("`distill.batch` and `distill.eval_every` must be at least 1".into()));
        }
        if d.embed_dim == 0 || d.num_heads == 0 || !d.embed_dim.is_multiple_of(d.num_heads) || d.num_blocks == 0 {
            return Err(Error::Config("`distill.embed_dim`: must be a positive multiple of `distill.num_heads`".into()));
        }
        d.config.optim.validate().map_err(|e| field("distill.config.optim", e))?;
        d.config.aug.validate(model.patch_size).map_err(|e| field("distill.config.aug", e))?;
        let f = &self.finetune;
        if !(f.fraction > 0.0 && f.fraction <= 1.0) {
            return Err(Error::Config(format!("`finetune.fraction`: {} is outside (0, 1]", f.fraction)));
        }
        if f.resamples == 0 {
            return Err(Error::Config("`finetune.resamples`: must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&f.score_thresh) || !(0.0..=1.0).contains(&f.nms_iou) {
            return Err(Error::Config("`finetune.score_thresh` and `finetune.nms_iou` must lie in [0, 1]".into()));
        }
        f.train.validate().map_err(|e| field("finetune.train", e))?;
        f.adapter.validate(model.num_blocks).map_err(|e| field("finetune.adapter", e))?;
        Ok(())
    }
}

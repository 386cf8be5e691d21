//! Frozen-teacher distillation into a (smaller) student.
//!
//! Same objectives as pretraining, with three differences: the teacher never
//! changes, teacher targets are a plain softmax at the student temperature
//! (no centring), and the class-token loss pairs each teacher view with the
//! student's copy of the same view. An equal-size student copied from the
//! teacher therefore starts at loss = teacher entropy.

use serde::{Deserialize, Serialize};

use crate::backbone::{FfnKind, ModelConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{AdamW, OptimConfig};
use crate::par::Exec;
use crate::ssl::{
    apply_passes, make_targets, make_views, softmax_row, student_pass, summarize, teacher_pass, view_seed, AugConfig,
    HeadConfig, Objective, PairMode, ProjectionHead, SslModel, StepStats, TargetMode, ViewBatch,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub aug: AugConfig,
    pub optim: OptimConfig,
    pub w_dis: f64,
    pub w_rec: f64,
    /// Temperature for both teacher and student distributions.
    pub tau: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            aug: AugConfig::default(),
            optim: OptimConfig::default(),
            w_dis: 1.0,
            w_rec: 1.0,
            tau: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DistillJob {
    pub config: DistillConfig,
    pub teacher: SslModel,
    pub student: SslModel,
    opts: [AdamW; 3],
    pub step: usize,
    pub total_steps: usize,
    pub exec: Exec,
}

impl DistillJob {
    /// Fresh student with `student_config` (usually ReLU-MLP) and heads
    /// matching the teacher's prototype count.
    pub fn new(teacher: SslModel, student_config: ModelConfig, config: DistillConfig, seed: u64, total_steps: usize) -> Result<Self> {
        let head = HeadConfig {
            tau_student: config.tau,
            ..teacher.cls_head.config.clone()
        };
        let student = SslModel::new(student_config, head, seed)?;
        Self::with_student(teacher, student, config, total_steps)
    }

    pub fn with_student(mut teacher: SslModel, mut student: SslModel, config: DistillConfig, total_steps: usize) -> Result<Self> {
        config.optim.validate()?;
        config.aug.validate(student.backbone.config.patch_size)?;
        if config.tau <= 0.0 {
            return Err(Error::Config("distillation temperature must be positive".into()));
        }
        for (t, s, what) in [
            (&teacher.cls_head, &student.cls_head, "class"),
            (&teacher.patch_head, &student.patch_head, "patch"),
        ] {
            if t.config.prototypes != s.config.prototypes {
                return Err(Error::Config(format!(
                    "teacher {what} head has {} prototypes, student has {}",
                    t.config.prototypes, s.config.prototypes
                )));
            }
        }
        if config.aug.mask_ratio > 0.0 && config.w_rec > 0.0 && teacher.backbone.config.patch_size != student.backbone.config.patch_size {
            return Err(Error::Config("patch loss needs equal teacher and student patch sizes".into()));
        }
        teacher.set_trainable(false);
        student.set_trainable(true);
        for h in [&mut student.cls_head, &mut student.patch_head] {
            h.config.tau_student = config.tau;
        }
        let opts = student.stores().map(|s| AdamW::new(config.optim.clone(), s));
        Ok(Self {
            config,
            teacher,
            student,
            opts,
            step: 0,
            total_steps,
            exec: Exec::default(),
        })
    }

    /// Student initialised as an exact (trainable) copy of the teacher.
    pub fn from_copy(teacher: SslModel, config: DistillConfig, total_steps: usize) -> Result<Self> {
        let student = teacher.clone();
        Self::with_student(teacher, student, config, total_steps)
    }

    pub fn objective(&self, batch: usize) -> Objective {
        Objective {
            w_dis: self.config.w_dis,
            w_rec: self.config.w_rec,
            pairs: PairMode::SameView,
            rec_all_patches: false,
            scale: 1.0 / batch.max(1) as f64,
        }
    }

    /// Losses on `batch` without updating anything.
    pub fn evaluate(&self, batch: &[ViewBatch]) -> Result<StepStats> {
        let (passes, obj) = self.passes(batch)?;
        Ok(summarize(self.step, &passes, &obj, 0.0, 0.0, 1.0))
    }

    fn passes(&self, batch: &[ViewBatch]) -> Result<(Vec<crate::ssl::StudentPass>, Objective)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let teacher = &self.teacher;
        let outs = self.exec.try_map(batch, |v| teacher_pass(teacher, v))?;
        let targets = make_targets(teacher, &outs, TargetMode::Plain { tau: self.config.tau })?;
        let obj = self.objective(batch.len());
        let student = &self.student;
        let passes = self
            .exec
            .try_map_range(batch.len(), |i| student_pass(student, &batch[i], &targets[i], &obj))?;
        Ok((passes, obj))
    }

    pub fn step(&mut self, batch: &[ViewBatch]) -> Result<StepStats> {
        let (passes, obj) = self.passes(batch)?;
        let lr = self.config.optim.lr_at(self.step, self.total_steps);
        let stats = summarize(self.step, &passes, &obj, 0.0, lr, 1.0);
        if !stats.loss_total.is_finite() {
            return Err(Error::NonFinite(format!("step {}: {}", self.step, stats.to_json_line())));
        }
        apply_passes(&mut self.student, &mut self.opts, &passes, lr)?;
        self.step += 1;
        Ok(stats)
    }

    pub fn views_for(&self, images: &[Image], seed: u64) -> Result<Vec<ViewBatch>> {
        let p = self.student.backbone.config.patch_size;
        let (step, aug) = (self.step, &self.config.aug);
        self.exec
            .try_map_range(images.len(), |i| make_views(&images[i], aug, p, view_seed(seed, step, i)))
    }

    pub fn step_images(&mut self, images: &[Image], seed: u64) -> Result<StepStats> {
        let views = self.views_for(images, seed)?;
        self.step(&views)
    }

    /// Mean `KL(teacher || student)` of class-token distributions at the
    /// distillation temperature, on clean images.
    pub fn kl(&self, images: &[Image]) -> Result<f64> {
        let per = self.exec.try_map(images, |img| -> Result<f64> {
            let t = dist(&self.teacher.cls_logits(img)?, self.config.tau);
            let s = dist(&self.student.cls_logits(img)?, self.config.tau);
            Ok(t.iter()
                .zip(&s)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p.ln() - q.max(1e-300).ln()))
                .sum())
        })?;
        Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
    }

    pub fn agreement(&self, images: &[Image]) -> Result<f64> {
        agreement(&self.teacher, &self.student, images, self.exec)
    }
}

fn dist(logits: &[f64], tau: f64) -> Vec<f64> {
    softmax_row(&logits.iter().map(|l| l / tau).collect::<Vec<_>>())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose class-token argmax prototype agrees.
pub fn agreement(teacher: &SslModel, student: &SslModel, images: &[Image], exec: Exec) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("agreement needs at least one image".into()));
    }
    let hits = exec.try_map(images, |img| -> Result<bool> {
        Ok(argmax(&teacher.cls_logits(img)?) == argmax(&student.cls_logits(img)?))
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / images.len() as f64)
}

/// Student config derived from a teacher: ReLU-MLP feed-forward, same patch
/// size and input resolution.
pub fn student_config(teacher: &ModelConfig, embed_dim: usize, num_heads: usize, num_blocks: usize) -> ModelConfig {
    ModelConfig {
        embed_dim,
        num_heads,
        num_blocks,
        ffn_kind: FfnKind::ReluMlp,
        ..teacher.clone()
    }
}

/// Head config for a student that must match `teacher`'s prototypes.
pub fn matching_head(teacher: &ProjectionHead, tau: f64) -> HeadConfig {
    HeadConfig {
        tau_student: tau,
        ..teacher.config.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;
    use crate::rng::CounterRng;
    use crate::ssl::entropy;

    fn images(n: usize, off: u64) -> Vec<Image> {
        (0..n)
            .map(|i| {
                let mut r = CounterRng::new(off + i as u64);
                Image::new(32, 32, (0..32 * 32 * 3).map(|_| r.uniform()).collect()).unwrap()
            })
            .collect()
    }

    fn teacher() -> SslModel {
        let head = HeadConfig {
            hidden: 16,
            bottleneck: 8,
            prototypes: 16,
            ..Default::default()
        };
        SslModel::new(ModelConfig::preset(Preset::Tiny), head, 11).unwrap()
    }

    #[test]
    fn copied_student_starts_at_teacher_entropy() {
        let cfg = DistillConfig {
            aug: AugConfig::identity(32),
            ..Default::default()
        };
        let job = DistillJob::from_copy(teacher(), cfg, 10).unwrap();
        let imgs = images(3, 0);
        let views = job.views_for(&imgs, 1).unwrap();
        let stats = job.evaluate(&views).unwrap();
        let h: f64 = imgs
            .iter()
            .map(|im| entropy(&dist(&job.teacher.cls_logits(im).unwrap(), job.config.tau)))
            .sum::<f64>()
            / 3.0;
        assert!((stats.loss_dis - h).abs() < 1e-9, "{} vs {h}", stats.loss_dis);
        assert_eq!(job.agreement(&imgs).unwrap(), 1.0);
        assert!(job.kl(&imgs).unwrap().abs() < 1e-12);
    }

    #[test]
    fn teacher_is_frozen_and_prototypes_checked() {
        let t = teacher();
        let sc = student_config(&t.backbone.config, 16, 2, 1);
        let mut job = DistillJob::new(t.clone(), sc.clone(), DistillConfig::default(), 3, 5).unwrap();
        let before = job.teacher.checksum();
        for _ in 0..2 {
            job.step_images(&images(2, 5), 4).unwrap();
        }
        assert_eq!(job.teacher.checksum(), before);
        assert!(!job.teacher.any_grad());
        let other = SslModel::new(sc, HeadConfig { prototypes: 8, hidden: 16, bottleneck: 8, ..Default::default() }, 1).unwrap();
        assert!(matches!(DistillJob::with_student(t, other, DistillConfig::default(), 5), Err(Error::Config(_))));
    }
}

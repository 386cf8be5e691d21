//! Self-supervised pretraining with a momentum teacher.
//!
//! The student sees two masked global views plus local views; the EMA
//! teacher sees the unmasked global views. The class-token objective
//! compares teacher and student prototype distributions across views, and
//! the patch objective compares them at masked positions of the same view.

pub mod head;
pub mod loss;
pub mod views;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::backbone::{Backbone, ForwardOptions, ModelConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{AdamW, OptimConfig};
use crate::par::Exec;
use crate::rng::{splitmix64, CounterRng};
use crate::tensor::{ParamId, ParamStore};

pub use head::{entropy, sinkhorn_normalize, softmax_row, HeadConfig, ProjectionHead};
pub use loss::{loss_dis, loss_rec, PairMode, PatchTerm};
pub use views::{make_views, mask_count, random_mask, AugConfig, ViewBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub head: HeadConfig,
    pub aug: AugConfig,
    pub optim: OptimConfig,
    pub w_dis: f64,
    pub w_rec: f64,
    /// Mix weight of Sinkhorn-Knopp targets into the centred teacher
    /// targets; 0 skips Sinkhorn entirely.
    pub sk_weight: f64,
    pub sk_iters: usize,
    pub ema_momentum: f64,
    /// Patch loss over every position instead of masked ones only.
    pub rec_all_patches: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            aug: AugConfig::default(),
            optim: OptimConfig::default(),
            w_dis: 1.0,
            w_rec: 1.0,
            sk_weight: 0.0,
            sk_iters: 3,
            ema_momentum: 0.996,
            rec_all_patches: false,
        }
    }
}

impl SslConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.head.validate()?;
        self.aug.validate(model.patch_size)?;
        self.optim.validate()?;
        if self.w_dis < 0.0 || self.w_rec < 0.0 || !(0.0..=1.0).contains(&self.sk_weight) {
            return Err(Error::Config("loss weights must be >= 0 and sk_weight in [0, 1]".into()));
        }
        if self.sk_weight > 0.0 && self.sk_iters == 0 {
            return Err(Error::Config("sk_iters must be >= 1 when sk_weight > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config("ema_momentum outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Backbone with class-token and patch-token projection heads.
#[derive(Clone, Debug)]
pub struct SslModel {
    pub backbone: Backbone,
    pub cls_head: ProjectionHead,
    pub patch_head: ProjectionHead,
}

impl SslModel {
    pub fn new(model: ModelConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(model, seed)?;
        let d = backbone.config.embed_dim;
        let mut rng = CounterRng::new(seed).fork(0x4EAD);
        let cls_head = ProjectionHead::new(head.clone(), d, &mut rng)?;
        let patch_head = ProjectionHead::new(head, d, &mut rng)?;
        Ok(Self {
            backbone,
            cls_head,
            patch_head,
        })
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.backbone.params, &self.cls_head.params, &self.patch_head.params]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore; 3] {
        [
            &mut self.backbone.params,
            &mut self.cls_head.params,
            &mut self.patch_head.params,
        ]
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for s in self.stores_mut() {
            s.set_trainable(flag);
        }
    }

    /// SHA-256 over the three component checksums.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.stores() {
            h.update(s.checksum().as_bytes());
        }
        crate::tensor::hex(&h.finalize())
    }

    pub fn any_grad(&self) -> bool {
        self.stores().iter().any(|s| s.any_grad().is_some())
    }

    /// `self <- m self + (1 - m) other` on every parameter; prototypes are
    /// renormalised afterwards.
    pub fn ema_from(&mut self, other: &SslModel, m: f64) -> Result<()> {
        for (dst, src) in self.stores_mut().into_iter().zip(other.stores()) {
            dst.ema_from(src, m)?;
        }
        self.cls_head.renormalize_prototypes();
        self.patch_head.renormalize_prototypes();
        Ok(())
    }

    /// Class-token logits of the clean image (no augmentation).
    pub fn cls_logits(&self, image: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.backbone.forward(&mut g, image, ForwardOptions::default())?;
        let l = self.cls_head.logits(&mut g, out.cls)?;
        Ok(g.value(l).to_vec())
    }
}

/// Teacher logits for one image's global views.
#[derive(Clone, Debug)]
pub struct TeacherOutput {
    pub cls: Vec<Vec<f64>>,
    pub patches: Vec<Vec<f64>>,
}

pub fn teacher_pass(teacher: &SslModel, views: &ViewBatch) -> Result<TeacherOutput> {
    let mut cls = Vec::with_capacity(views.globals.len());
    let mut patches = Vec::with_capacity(views.globals.len());
    for img in &views.globals {
        let mut g = Graph::new();
        let out = teacher.backbone.forward(&mut g, img, ForwardOptions::default())?;
        let c = teacher.cls_head.logits(&mut g, out.cls)?;
        let p = teacher.patch_head.logits(&mut g, out.patches)?;
        cls.push(g.value(c).to_vec());
        patches.push(g.value(p).to_vec());
    }
    Ok(TeacherOutput { cls, patches })
}

/// Teacher distributions for one image.
#[derive(Clone, Debug)]
pub struct Targets {
    pub cls: Vec<Vec<f64>>,
    pub patches: Vec<Vec<f64>>,
}

/// How teacher logits become target distributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetMode {
    /// Centred softmax at the teacher temperature, optionally mixed with
    /// Sinkhorn-Knopp assignments computed over the whole batch.
    Centered { sk_weight: f64, sk_iters: usize },
    /// Plain softmax at a fixed temperature.
    Plain { tau: f64 },
}

fn mix_sinkhorn(
    probs: &mut [Vec<Vec<f64>>],
    logits: &[&Vec<Vec<f64>>],
    head: &ProjectionHead,
    w: f64,
    iters: usize,
) -> Result<()> {
    let k = head.config.prototypes;
    let tau = head.config.tau_teacher;
    let flat: Vec<f64> = logits.iter().flat_map(|v| v.iter().flatten()).map(|l| l / tau).collect();
    let q = sinkhorn_normalize(&flat, k, iters)?;
    let mut at = 0;
    for per_image in probs.iter_mut() {
        for view in per_image.iter_mut() {
            for p in view.iter_mut() {
                *p = (1.0 - w) * *p + w * q[at];
                at += 1;
            }
        }
    }
    Ok(())
}

pub fn make_targets(
    teacher: &SslModel,
    outs: &[TeacherOutput],
    mode: TargetMode,
) -> Result<Vec<Targets>> {
    let conv = |head: &ProjectionHead, v: &Vec<f64>| -> Vec<f64> {
        match mode {
            TargetMode::Centered { .. } => head.teacher_probs(v),
            TargetMode::Plain { tau } => v
                .chunks(head.config.prototypes)
                .flat_map(|r| softmax_row(&r.iter().map(|l| l / tau).collect::<Vec<_>>()))
                .collect(),
        }
    };
    let mut cls: Vec<Vec<Vec<f64>>> = outs
        .iter()
        .map(|o| o.cls.iter().map(|v| conv(&teacher.cls_head, v)).collect())
        .collect();
    let mut patches: Vec<Vec<Vec<f64>>> = outs
        .iter()
        .map(|o| o.patches.iter().map(|v| conv(&teacher.patch_head, v)).collect())
        .collect();
    if let TargetMode::Centered { sk_weight, sk_iters } = mode {
        if sk_weight > 0.0 {
            let cl: Vec<_> = outs.iter().map(|o| &o.cls).collect();
            mix_sinkhorn(&mut cls, &cl, &teacher.cls_head, sk_weight, sk_iters)?;
            let pl: Vec<_> = outs.iter().map(|o| &o.patches).collect();
            mix_sinkhorn(&mut patches, &pl, &teacher.patch_head, sk_weight, sk_iters)?;
        }
    }
    Ok(cls
        .into_iter()
        .zip(patches)
        .map(|(cls, patches)| Targets { cls, patches })
        .collect())
}

/// Loss settings shared by pretraining and distillation.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub w_dis: f64,
    pub w_rec: f64,
    pub pairs: PairMode,
    pub rec_all_patches: bool,
    /// Scale applied to this image's loss before backward (1 / batch).
    pub scale: f64,
}

/// Result of one student forward/backward on one image.
#[derive(Clone, Debug)]
pub struct StudentPass {
    pub loss_dis: f64,
    pub loss_rec: f64,
    pub rec_positions: usize,
    pub grads: [Vec<(ParamId, Vec<f64>)>; 3],
}

pub fn student_pass(student: &SslModel, views: &ViewBatch, targets: &Targets, obj: &Objective) -> Result<StudentPass> {
    let mut g = Graph::new();
    // Masking only serves the patch objective.
    let use_mask = obj.w_rec > 0.0;
    let mut cls_probs = Vec::with_capacity(views.num_student_views());
    let mut patch_probs = Vec::with_capacity(views.globals.len());
    for (v, img) in views.globals.iter().enumerate() {
        let opts = ForwardOptions {
            mask: use_mask.then(|| views.masks[v].as_slice()),
            ..Default::default()
        };
        let out = student.backbone.forward(&mut g, img, opts)?;
        let c = student.cls_head.logits(&mut g, out.cls)?;
        cls_probs.push(student.cls_head.student_probs(&mut g, c)?);
        if use_mask {
            let p = student.patch_head.logits(&mut g, out.patches)?;
            patch_probs.push(student.patch_head.student_probs(&mut g, p)?);
        }
    }
    // Same-view pairing has no teacher counterpart for local views.
    let locals = if obj.pairs == PairMode::SameView { &[][..] } else { &views.locals[..] };
    for img in locals {
        let out = student.backbone.forward(&mut g, img, ForwardOptions::default())?;
        let c = student.cls_head.logits(&mut g, out.cls)?;
        cls_probs.push(student.cls_head.student_probs(&mut g, c)?);
    }
    let dis = loss_dis(&mut g, &targets.cls, &cls_probs, obj.pairs)?;
    let (rec, rec_positions) = if use_mask {
        let terms: Vec<PatchTerm<'_>> = patch_probs
            .iter()
            .enumerate()
            .map(|(v, &student)| PatchTerm {
                teacher: &targets.patches[v],
                student,
                mask: &views.masks[v],
            })
            .collect();
        loss_rec(&mut g, &terms, obj.rec_all_patches)?
    } else {
        (None, 0)
    };
    let mut parts = Vec::new();
    if let Some(d) = dis {
        parts.push(g.scale(d, obj.w_dis * obj.scale));
    }
    if let Some(r) = rec {
        parts.push(g.scale(r, obj.w_rec * obj.scale));
    }
    let loss_dis = dis.map_or(0.0, |d| g.scalar(d));
    let loss_rec = rec.map_or(0.0, |r| g.scalar(r));
    if !loss_dis.is_finite() || !loss_rec.is_finite() {
        return Err(Error::NonFinite(format!("loss_dis = {loss_dis}, loss_rec = {loss_rec}")));
    }
    let mut grads = [Vec::new(), Vec::new(), Vec::new()];
    if let Some(&first) = parts.first() {
        let mut total = first;
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        g.backward(total)?;
        for (slot, store) in grads.iter_mut().zip(student.stores()) {
            *slot = g.param_grads(store);
        }
    }
    Ok(StudentPass {
        loss_dis,
        loss_rec,
        rec_positions,
        grads,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_dis: f64,
    pub sk_weight: f64,
    pub lr: f64,
    pub momentum: f64,
    /// No masked position in the whole batch; the patch loss was 0.
    pub rec_empty: bool,
}

impl StepStats {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serialises")
    }
}

/// Sum per-image gradients into the student in image order, then step.
pub(crate) fn apply_passes(
    student: &mut SslModel,
    opts: &mut [AdamW; 3],
    passes: &[StudentPass],
    lr: f64,
) -> Result<()> {
    for p in passes {
        for (k, store) in student.stores_mut().into_iter().enumerate() {
            for (id, g) in &p.grads[k] {
                store.get_mut(*id).accumulate_grad(g)?;
            }
        }
    }
    for (opt, store) in opts.iter_mut().zip(student.stores_mut()) {
        opt.step(store, lr)?;
    }
    student.cls_head.renormalize_prototypes();
    student.patch_head.renormalize_prototypes();
    Ok(())
}

pub(crate) fn summarize(step: usize, passes: &[StudentPass], obj: &Objective, sk_weight: f64, lr: f64, momentum: f64) -> StepStats {
    let n = passes.len().max(1) as f64;
    let loss_dis = passes.iter().map(|p| p.loss_dis).sum::<f64>() / n;
    let loss_rec = passes.iter().map(|p| p.loss_rec).sum::<f64>() / n;
    StepStats {
        step,
        loss_total: obj.w_dis * loss_dis + obj.w_rec * loss_rec,
        loss_rec,
        loss_dis,
        sk_weight,
        lr,
        momentum,
        rec_empty: obj.w_rec > 0.0 && passes.iter().all(|p| p.rec_positions == 0),
    }
}

/// View seed for image `i` at `step` of a run seeded by `seed`.
pub fn view_seed(seed: u64, step: usize, i: usize) -> u64 {
    splitmix64(splitmix64(seed ^ 0x7E3A) ^ ((step as u64) << 32 | i as u64))
}

/// Student, EMA teacher and optimizer state for stage-one pretraining.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub config: SslConfig,
    pub student: SslModel,
    pub teacher: SslModel,
    opts: [AdamW; 3],
    pub step: usize,
    pub total_steps: usize,
    pub exec: Exec,
}

impl Pretrainer {
    pub fn new(model: ModelConfig, config: SslConfig, seed: u64, total_steps: usize) -> Result<Self> {
        config.validate(&model)?;
        let student = SslModel::new(model, config.head.clone(), seed)?;
        Self::from_student(student, config, total_steps)
    }

    /// Teacher starts as an exact copy of `student`.
    pub fn from_student(student: SslModel, config: SslConfig, total_steps: usize) -> Result<Self> {
        config.validate(&student.backbone.config)?;
        let mut teacher = student.clone();
        teacher.set_trainable(false);
        let opts = student.stores().map(|s| AdamW::new(config.optim.clone(), s));
        Ok(Self {
            config,
            student,
            teacher,
            opts,
            step: 0,
            total_steps,
            exec: Exec::default(),
        })
    }

    pub fn objective(&self, batch: usize) -> Objective {
        Objective {
            w_dis: self.config.w_dis,
            w_rec: self.config.w_rec,
            pairs: PairMode::CrossView,
            rec_all_patches: self.config.rec_all_patches,
            scale: 1.0 / batch.max(1) as f64,
        }
    }

    /// One optimisation step: teacher targets, student backward, AdamW,
    /// EMA teacher update, then centre update. The centre is seeded from the
    /// first batch.
    pub fn step(&mut self, batch: &[ViewBatch]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let exec = self.exec;
        let teacher = &self.teacher;
        let outs = exec.try_map(batch, |v| teacher_pass(teacher, v))?;
        let cls: Vec<f64> = outs.iter().flat_map(|o| o.cls.iter().flatten().copied()).collect();
        let pat: Vec<f64> = outs.iter().flat_map(|o| o.patches.iter().flatten().copied()).collect();
        if self.step == 0 {
            self.teacher.cls_head.seed_center(&cls);
            self.teacher.patch_head.seed_center(&pat);
        }
        let teacher = &self.teacher;
        let mode = TargetMode::Centered {
            sk_weight: self.config.sk_weight,
            sk_iters: self.config.sk_iters,
        };
        let targets = make_targets(teacher, &outs, mode)?;
        let obj = self.objective(batch.len());
        let student = &self.student;
        let passes = exec.try_map_range(batch.len(), |i| student_pass(student, &batch[i], &targets[i], &obj))?;
        let lr = self.config.optim.lr_at(self.step, self.total_steps);
        let m = self.config.ema_momentum;
        let stats = summarize(self.step, &passes, &obj, self.config.sk_weight, lr, m);
        if !stats.loss_total.is_finite() {
            return Err(Error::NonFinite(format!("step {}: {}", self.step, stats.to_json_line())));
        }
        apply_passes(&mut self.student, &mut self.opts, &passes, lr)?;
        self.teacher.ema_from(&self.student, m)?;
        self.teacher.cls_head.update_center(&cls);
        self.teacher.patch_head.update_center(&pat);
        self.step += 1;
        Ok(stats)
    }

    pub fn views_for(&self, images: &[Image], seed: u64) -> Result<Vec<ViewBatch>> {
        let p = self.student.backbone.config.patch_size;
        let step = self.step;
        let aug = &self.config.aug;
        self.exec
            .try_map_range(images.len(), |i| make_views(&images[i], aug, p, view_seed(seed, step, i)))
    }

    /// Fresh views of `images` for the current step, then [`Self::step`].
    pub fn step_images(&mut self, images: &[Image], seed: u64) -> Result<StepStats> {
        let views = self.views_for(images, seed)?;
        self.step(&views)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;

    fn images(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| {
                let mut r = CounterRng::new(i as u64);
                Image::new(32, 32, (0..32 * 32 * 3).map(|_| r.uniform()).collect()).unwrap()
            })
            .collect()
    }

    fn small() -> SslConfig {
        SslConfig {
            head: HeadConfig {
                hidden: 16,
                bottleneck: 8,
                prototypes: 16,
                ..Default::default()
            },
            aug: AugConfig {
                num_local: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn teacher_never_gets_gradients() {
        let mut p = Pretrainer::new(ModelConfig::preset(Preset::Tiny), small(), 1, 4).unwrap();
        let before = p.teacher.checksum();
        let s = p.step_images(&images(2), 9).unwrap();
        assert!(s.loss_total.is_finite() && s.loss_rec > 0.0);
        assert!(!p.teacher.any_grad());
        assert!(!p.student.any_grad());
        assert_ne!(p.teacher.checksum(), before);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let mut a = Pretrainer::new(ModelConfig::preset(Preset::Tiny), small(), 2, 4).unwrap();
        let mut b = a.clone();
        b.exec = Exec::Sequential;
        let imgs = images(3);
        for _ in 0..2 {
            assert_eq!(a.step_images(&imgs, 3).unwrap(), b.step_images(&imgs, 3).unwrap());
        }
        assert_eq!(a.student.checksum(), b.student.checksum());
        assert_eq!(a.teacher.checksum(), b.teacher.checksum());
    }

    #[test]
    fn zero_rec_weight_ignores_masks() {
        let cfg = SslConfig {
            w_rec: 0.0,
            ..small()
        };
        let p = Pretrainer::new(ModelConfig::preset(Preset::Tiny), cfg, 3, 4).unwrap();
        let mut views = p.views_for(&images(1), 5).unwrap();
        let a = p.clone().step(&views).unwrap();
        views[0].masks[0] = vec![true; 16];
        let b = p.clone().step(&views).unwrap();
        assert_eq!(a.loss_total, b.loss_total);
    }

    #[test]
    fn zero_sk_weight_is_centering_path() {
        let p = Pretrainer::new(ModelConfig::preset(Preset::Tiny), small(), 4, 4).unwrap();
        let views = p.views_for(&images(2), 1).unwrap();
        let outs: Vec<_> = views.iter().map(|v| teacher_pass(&p.teacher, v).unwrap()).collect();
        let t = make_targets(&p.teacher, &outs, TargetMode::Centered { sk_weight: 0.0, sk_iters: 3 }).unwrap();
        for (o, t) in outs.iter().zip(&t) {
            for (l, d) in o.cls.iter().zip(&t.cls) {
                assert_eq!(&p.teacher.cls_head.teacher_probs(l), d);
            }
        }
        let s = make_targets(&p.teacher, &outs, TargetMode::Centered { sk_weight: 0.5, sk_iters: 3 }).unwrap();
        assert_ne!(s[0].cls, t[0].cls);
        for d in s.iter().flat_map(|t| t.patches.iter()) {
            for row in d.chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

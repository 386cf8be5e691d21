//! Prototype projection heads and teacher-side normalisation.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{ParamId, ParamStore, Parameterized, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub center_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            bottleneck: 32,
            prototypes: 64,
            tau_student: 0.1,
            tau_teacher: 0.04,
            center_momentum: 0.9,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.bottleneck == 0 || self.prototypes < 2 {
            return Err(Error::Config("head widths must be positive and prototypes >= 2".into()));
        }
        if self.tau_student <= 0.0 || self.tau_teacher <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::Config("center_momentum outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Three-layer GELU MLP to an L2-normalised bottleneck, followed by cosine
/// scores against `K` unit-norm prototypes.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub config: HeadConfig,
    pub params: ParamStore,
    /// Running mean of teacher logits, subtracted before the teacher softmax.
    pub center: Vec<f64>,
    layers: [(ParamId, ParamId); 3],
    prototypes: ParamId,
}

impl Parameterized for ProjectionHead {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl ProjectionHead {
    pub fn layout(config: &HeadConfig, in_dim: usize) -> Vec<(String, Vec<usize>)> {
        let (h, b) = (config.hidden, config.bottleneck);
        let mut out = Vec::new();
        for (i, (a, c)) in [(in_dim, h), (h, h), (h, b)].into_iter().enumerate() {
            out.push((format!("mlp.{i}.weight"), vec![a, c]));
            out.push((format!("mlp.{i}.bias"), vec![c]));
        }
        out.push(("prototypes".to_string(), vec![config.prototypes, b]));
        out
    }

    pub fn new(config: HeadConfig, in_dim: usize, rng: &mut CounterRng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape) in Self::layout(&config, in_dim) {
            let t = if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                Tensor::randn(shape, std, rng)
            };
            store.add(name, t);
        }
        let mut head = Self::from_params(config, store)?;
        head.renormalize_prototypes();
        Ok(head)
    }

    pub fn from_params(config: HeadConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let in_dim = params
            .id("mlp.0.weight")
            .map(|id| params.get(id).shape()[0])
            .ok_or_else(|| Error::Config("head parameters lack `mlp.0.weight`".into()))?;
        let layout = Self::layout(&config, in_dim);
        let matches = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((n, s), (_, pn, t))| n == pn && s.as_slice() == t.shape());
        if !matches {
            return Err(Error::Config("head parameters do not match the head configuration".into()));
        }
        let id = |n: &str| params.id(n).expect("layout checked");
        let layers = [0, 1, 2].map(|i| (id(&format!("mlp.{i}.weight")), id(&format!("mlp.{i}.bias"))));
        let prototypes = id("prototypes");
        let k = config.prototypes;
        Ok(Self {
            config,
            params,
            center: vec![0.0; k],
            layers,
            prototypes,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.params.get(self.layers[0].0).shape()[0]
    }

    /// Cosine scores, `rows x K`, each in `[-1, 1]`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(&self.params, w);
            let b = g.param(&self.params, b);
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
            if i < 2 {
                h = g.gelu(h);
            }
        }
        let z = g.l2_normalize_rows(h, 1e-12);
        let p = g.param(&self.params, self.prototypes);
        let pt = g.transpose(p)?;
        g.matmul(z, pt)
    }

    /// Student distributions: softmax of `logits / tau_student`.
    pub fn student_probs(&self, g: &mut Graph, logits: Var) -> Result<Var> {
        let s = g.scale(logits, 1.0 / self.config.tau_student);
        g.softmax(s, 1)
    }

    /// Centred teacher distributions at `tau_teacher`, row-major.
    pub fn teacher_probs(&self, logits: &[f64]) -> Vec<f64> {
        let k = self.config.prototypes;
        let mut out = Vec::with_capacity(logits.len());
        for row in logits.chunks(k) {
            let z: Vec<f64> = row
                .iter()
                .zip(&self.center)
                .map(|(l, c)| (l - c) / self.config.tau_teacher)
                .collect();
            out.extend(softmax_row(&z));
        }
        out
    }

    /// `center <- m center + (1 - m) mean(rows)`.
    pub fn update_center(&mut self, logits: &[f64]) {
        let k = self.config.prototypes;
        let rows = logits.len() / k;
        if rows == 0 {
            return;
        }
        let m = self.config.center_momentum;
        for j in 0..k {
            let mean = (0..rows).map(|i| logits[i * k + j]).sum::<f64>() / rows as f64;
            self.center[j] = m * self.center[j] + (1.0 - m) * mean;
        }
    }

    /// `center <- mean(rows)`; used on the first step so the running centre
    /// does not start from an arbitrary zero.
    pub fn seed_center(&mut self, logits: &[f64]) {
        let m = self.config.center_momentum;
        self.config.center_momentum = 0.0;
        self.update_center(logits);
        self.config.center_momentum = m;
    }

    pub fn renormalize_prototypes(&mut self) {
        let t = self.params.get_mut(self.prototypes);
        let b = t.shape()[1];
        for row in t.data_mut().chunks_mut(b) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
    }

    pub fn prototype_norms(&self) -> Vec<f64> {
        let t = self.params.get(self.prototypes);
        let b = t.shape()[1];
        t.data().chunks(b).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }
}

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

/// Sinkhorn-Knopp on `exp(scores)`, `rows x k`: each iteration scales
/// columns to sum `rows / k`, then rows to sum 1.
pub fn sinkhorn_normalize(scores: &[f64], k: usize, iters: usize) -> Result<Vec<f64>> {
    if iters == 0 {
        return Err(Error::Config("sinkhorn needs at least one iteration".into()));
    }
    if k == 0 || !scores.len().is_multiple_of(k) {
        return Err(Error::Dimension(format!("{} scores do not form rows of {k}", scores.len())));
    }
    let rows = scores.len() / k;
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let col_target = rows as f64 / k as f64;
    for _ in 0..iters {
        for j in 0..k {
            let s: f64 = (0..rows).map(|i| q[i * k + j]).sum();
            if s > 0.0 {
                let f = col_target / s;
                (0..rows).for_each(|i| q[i * k + j] *= f);
            }
        }
        for row in q.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinkhorn_examples() {
        let q = sinkhorn_normalize(&[0.0; 12], 4, 1).unwrap();
        assert!(q.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let mut r = CounterRng::new(3);
        // cosine-score range; much wider logits converge more slowly
        let s: Vec<f64> = (0..64 * 16).map(|_| r.uniform_range(-1.0, 1.0)).collect();
        let q = sinkhorn_normalize(&s, 16, 3).unwrap();
        for j in 0..16 {
            let c: f64 = (0..64).map(|i| q[i * 16 + j]).sum();
            assert!((c - 4.0).abs() < 1e-3, "column {j}: {c}");
        }
        for row in q.chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sharper_teacher_has_lower_entropy() {
        let mut r = CounterRng::new(4);
        let head = ProjectionHead::new(HeadConfig::default(), 8, &mut r).unwrap();
        let logits: Vec<f64> = (0..64).map(|_| r.uniform_range(-1.0, 1.0)).collect();
        let t = head.teacher_probs(&logits);
        let s = softmax_row(&logits.iter().map(|l| l / head.config.tau_student).collect::<Vec<_>>());
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(entropy(&t) <= entropy(&s));
    }

    #[test]
    fn centering_zeroes_mean() {
        let mut r = CounterRng::new(5);
        let cfg = HeadConfig {
            center_momentum: 0.0,
            prototypes: 4,
            ..Default::default()
        };
        let mut head = ProjectionHead::new(cfg, 8, &mut r).unwrap();
        let logits: Vec<f64> = (0..5 * 4).map(|_| r.normal()).collect();
        head.update_center(&logits);
        for j in 0..4 {
            let m: f64 = (0..5).map(|i| logits[i * 4 + j] - head.center[j]).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn head_outputs_and_gradient() {
        use crate::autograd::check::{param_gradient_error, weighted_sum};
        let mut r = CounterRng::new(6);
        let cfg = HeadConfig {
            hidden: 6,
            bottleneck: 5,
            prototypes: 7,
            ..Default::default()
        };
        let head = ProjectionHead::new(cfg, 4, &mut r).unwrap();
        assert!(head.prototype_norms().iter().all(|n| (n - 1.0).abs() < 1e-12));
        let x = Tensor::randn([3, 4], 1.0, &mut r);
        let w = Tensor::randn([3, 7], 1.0, &mut r);
        let err = param_gradient_error(&head, 1e-5, 20, |g, h| {
            let xv = g.constant(&x);
            let l = h.logits(g, xv)?;
            let p = h.student_probs(g, l)?;
            weighted_sum(g, p, &w)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

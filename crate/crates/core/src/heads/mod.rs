//! Task heads trained on top of a frozen backbone.
//!
//! Classification and counting read detached backbone features, so the
//! backbone never enters their graphs. Segmentation and detection train an
//! [`Adapter`](crate::adapter::Adapter) jointly with the head; the backbone
//! is bound frozen and every step checks that it received no gradient.

mod classify;
mod count;
mod detect;
mod segment;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use classify::{ClassifierHead, FeatureMode};
pub use count::{point_grid, CountHead};
pub use detect::{nms, DetectModel, ScoredBox};
pub use segment::SegmentModel;

use crate::autograd::{Graph, Var};
use crate::backbone::{bilinear_mix, Backbone};
use crate::error::{Error, Result};
use crate::metrics::format_mean_std;
use crate::optim::{AdamW, OptimConfig};
use crate::par::Exec;
use crate::rng::CounterRng;
use crate::tensor::{ParamId, ParamStore};

/// Anything with trainable parameter stores.
pub trait Trainable: Clone + Sync {
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 8,
            seed: 0,
            optim: OptimConfig {
                lr: 5e-3,
                min_lr: 5e-4,
                warmup_steps: 10,
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("finetune steps and batch must be positive".into()));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    /// Mean minibatch loss per step.
    pub losses: Vec<f64>,
    pub backbone_before: String,
    pub backbone_after: String,
}

/// Minibatches of `batch` indices over `0..n`, reshuffled each epoch.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let (epoch, k) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    CounterRng::for_index(seed, epoch as u64).shuffle(&mut order);
    order[k * batch..((k + 1) * batch).min(n)].to_vec()
}

/// Minibatch AdamW over `n` samples. `loss(g, model, i)` builds sample `i`'s
/// loss; per-sample gradients are summed in index order, so parallel and
/// sequential runs agree bit for bit. Fails with a contract error if the
/// backbone checksum changes or any backbone parameter receives a gradient.
pub fn finetune<M, F>(model: &mut M, backbone: &Backbone, n: usize, config: &FinetuneConfig, exec: Exec, loss: F) -> Result<FinetuneReport>
where
    M: Trainable,
    F: Fn(&mut Graph, &M, usize) -> Result<Var> + Sync + Send,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::Input("finetuning needs at least one sample".into()));
    }
    let before = backbone.checksum();
    let mut opts: Vec<AdamW> = model.stores().into_iter().map(|s| AdamW::new(config.optim.clone(), s)).collect();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = batch_indices(n, config.batch, step, config.seed);
        let scale = 1.0 / idx.len() as f64;
        let frozen = &*model;
        let passes = exec.try_map(&idx, |&i| -> Result<(f64, Vec<Vec<(ParamId, Vec<f64>)>>)> {
            let mut g = Graph::new();
            let l = loss(&mut g, frozen, i)?;
            let value = g.scalar(l);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("step {step}, sample {i}: loss {value}")));
            }
            let l = g.scale(l, scale);
            g.backward(l)?;
            if let Some((id, _)) = g.param_grads(&backbone.params).first() {
                return Err(Error::Contract(format!(
                    "frozen backbone parameter `{}` received a gradient",
                    backbone.params.name(*id)
                )));
            }
            Ok((value, frozen.stores().into_iter().map(|s| g.param_grads(s)).collect()))
        })?;
        let lr = config.optim.lr_at(step, config.steps);
        for (_, grads) in &passes {
            for (store, gs) in model.stores_mut().into_iter().zip(grads) {
                for (id, g) in gs {
                    store.get_mut(*id).accumulate_grad(g)?;
                }
            }
        }
        for (opt, store) in opts.iter_mut().zip(model.stores_mut()) {
            opt.step(store, lr)?;
        }
        losses.push(passes.iter().map(|p| p.0).sum::<f64>() * scale);
    }
    let after = backbone.checksum();
    if after != before {
        return Err(Error::Contract("backbone checksum changed during finetuning".into()));
    }
    Ok(FinetuneReport {
        losses,
        backbone_before: before,
        backbone_after: after,
    })
}

/// `x + bilinear(patches)` with backbone patch tokens resampled onto the
/// `shape` grid of `x`.
pub fn fuse(g: &mut Graph, x: Var, shape: (usize, usize), patches: Var, grid: (usize, usize)) -> Result<Var> {
    let p = if grid == shape {
        patches
    } else {
        g.row_mix(patches, Arc::new(bilinear_mix(grid.0, grid.1, shape.0, shape.1)))?
    };
    g.add(x, p)
}

/// Sorted indices of a seeded random subset of `floor(fraction * n)`
/// (at least one) of `0..n`.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("data fraction {fraction} outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::Input("cannot subsample an empty dataset".into()));
    }
    let k = ((fraction * n as f64).floor() as usize).max(1);
    let mut idx = CounterRng::new(seed).choose_indices(n, k);
    idx.sort_unstable();
    Ok(idx)
}

pub const DATA_FRACTIONS: [f64; 4] = [1.0, 0.75, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedDataRow {
    pub fraction: f64,
    pub values: Vec<f64>,
}

/// Run `train_eval(subset, seed)` for every fraction and seed `0..seeds`.
pub fn reduced_data_protocol<F>(n: usize, fractions: &[f64], seeds: u64, mut train_eval: F) -> Result<Vec<ReducedDataRow>>
where
    F: FnMut(&[usize], u64) -> Result<f64>,
{
    if seeds == 0 {
        return Err(Error::Config("reduced-data protocol needs at least one seed".into()));
    }
    fractions
        .iter()
        .map(|&fraction| {
            let values = (0..seeds)
                .map(|s| train_eval(&subset_indices(n, fraction, s)?, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(ReducedDataRow { fraction, values })
        })
        .collect()
}

/// One line per fraction: `100%  96.8 (± 0.12)`.
pub fn format_reduced_table(metric: &str, rows: &[ReducedDataRow]) -> String {
    let mut out = format!("fraction  {metric}\n");
    for r in rows {
        out.push_str(&format!("{:>7}%  {}\n", (r.fraction * 100.0).round(), format_mean_std(&r.values)));
    }
    out
}

/// Row-wise argmax, ties to the lower index.
pub(crate) fn argmax_rows(v: &[f64], cols: usize) -> Vec<usize> {
    v.chunks(cols)
        .map(|r| {
            let mut best = 0;
            for (i, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn half_subsets_are_exact_and_distinct() {
        let subsets: BTreeSet<Vec<usize>> = (0..5).map(|s| subset_indices(40, 0.5, s).unwrap()).collect();
        assert_eq!(subsets.len(), 5);
        assert!(subsets.iter().all(|s| s.len() == 20 && s.windows(2).all(|w| w[0] < w[1])));
        assert_eq!(subset_indices(40, 1.0, 3).unwrap(), (0..40).collect::<Vec<_>>());
        assert!(subset_indices(40, 0.0, 0).is_err());
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(10, 3, s, 7)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn reduced_table_format() {
        let rows = reduced_data_protocol(20, &[1.0, 0.5], 5, |idx, s| Ok(idx.len() as f64 / 20.0 - 0.01 * s as f64)).unwrap();
        assert_eq!(rows[1].values.len(), 5);
        let t = format_reduced_table("BA", &rows);
        assert_eq!(t.lines().nth(1).unwrap(), "    100%  98.0 (± 1.58)");
        assert_eq!(t.lines().nth(2).unwrap(), "     50%  48.0 (± 1.58)");
    }
}

use super::{finetune, FinetuneConfig, FinetuneReport, Trainable};
use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, Features};
use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::par::Exec;
use crate::tensor::{ParamId, ParamStore, Parameterized, Tensor};

/// Per-patch density `softplus(x w + b)` on frozen patch tokens.
#[derive(Clone, Debug)]
pub struct CountHead {
    pub params: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl Parameterized for CountHead {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Trainable for CountHead {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Sum that does not depend on input order: sort, then pairwise summation.
pub(crate) fn order_free_sum(values: &[f64]) -> f64 {
    fn pairwise(v: &[f64]) -> f64 {
        if v.len() <= 2 {
            return v.iter().sum();
        }
        let (a, b) = v.split_at(v.len() / 2);
        pairwise(a) + pairwise(b)
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    pairwise(&v)
}

/// Points binned into a `gh x gw` grid of `patch`-pixel cells.
pub fn point_grid(points: &[[f64; 2]], gh: usize, gw: usize, patch: usize) -> Vec<f64> {
    let mut c = vec![0.0; gh * gw];
    for &[x, y] in points {
        let (i, j) = ((y / patch as f64).floor(), (x / patch as f64).floor());
        if i >= 0.0 && j >= 0.0 && (i as usize) < gh && (j as usize) < gw {
            c[i as usize * gw + j as usize] += 1.0;
        }
    }
    c
}

impl CountHead {
    pub fn new(embed_dim: usize) -> Self {
        let mut params = ParamStore::new();
        let w = params.add("density.weight", Tensor::zeros([embed_dim, 1]));
        // softplus(-3) ~ 0.05 per patch
        let b = params.add("density.bias", Tensor::full([1], -3.0));
        Self { params, w, b }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        match (params.id("density.weight"), params.id("density.bias")) {
            (Some(w), Some(b)) if params.len() == 2 && params.get(w).shape().len() == 2 && params.get(w).shape()[1] == 1 => {
                Ok(Self { params, w, b })
            }
            _ => Err(Error::Config("count head parameters must be `density.weight` (d x 1) and `density.bias`".into())),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.params.get(self.w).shape()[0]
    }

    pub fn density_from_features(&self, f: &Features) -> Result<Vec<f64>> {
        let (n, d) = f.patches.rows_cols();
        if d != self.in_dim() {
            return Err(dim_err!("count head expects width {}, got {d}", self.in_dim()));
        }
        let w = self.params.get(self.w).data();
        let b = self.params.get(self.b).data()[0];
        Ok((0..n)
            .map(|i| softplus(b + f.patches.row(i).iter().zip(w).map(|(x, w)| x * w).sum::<f64>()))
            .collect())
    }

    /// Density map (patch grid, row-major) and its total.
    pub fn count(&self, backbone: &Backbone, image: &Image) -> Result<(Vec<f64>, f64)> {
        let d = self.density_from_features(&backbone.encode(image)?)?;
        let total = order_free_sum(&d);
        Ok((d, total))
    }

    /// Squared error between predicted density and per-patch point counts.
    pub fn fit(&mut self, backbone: &Backbone, features: &[Features], points: &[Vec<[f64; 2]>], config: &FinetuneConfig, exec: Exec) -> Result<FinetuneReport> {
        if features.len() != points.len() {
            return Err(Error::Input(format!("{} feature sets for {} point sets", features.len(), points.len())));
        }
        let p = backbone.config.patch_size;
        let targets: Vec<Vec<f64>> = features.iter().zip(points).map(|(f, pts)| point_grid(pts, f.grid.0, f.grid.1, p)).collect();
        finetune(self, backbone, features.len(), config, exec, |g: &mut Graph, h: &CountHead, i| {
            h.loss(g, &features[i].patches, &targets[i])
        })
    }

    /// Mean squared error between the density over `patches` and per-patch
    /// target counts.
    pub fn loss(&self, g: &mut Graph, patches: &Tensor, target: &[f64]) -> Result<Var> {
        let x = g.constant(patches);
        let w = g.param(&self.params, self.w);
        let b = g.param(&self.params, self.b);
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        let dens = g.softplus(z);
        let t = g.constant_from(vec![target.len(), 1], target.to_vec())?;
        let e = g.sub(dens, t)?;
        let e2 = g.mul(e, e)?;
        Ok(g.mean_all(e2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_binning() {
        let c = point_grid(&[[0.5, 0.5], [7.9, 0.1], [8.0, 15.9], [100.0, 1.0]], 2, 2, 8);
        assert_eq!(c, vec![2.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_density_counts_zero() {
        assert_eq!(order_free_sum(&[0.0; 16]), 0.0);
    }

    proptest! {
        #[test]
        fn count_is_order_free(v in prop::collection::vec(0.0f64..10.0, 1..64), seed in any::<u64>()) {
            let mut w = v.clone();
            crate::rng::CounterRng::new(seed).shuffle(&mut w);
            prop_assert_eq!(order_free_sum(&v).to_bits(), order_free_sum(&w).to_bits());
            prop_assert!(order_free_sum(&v) >= 0.0);
        }
    }
}

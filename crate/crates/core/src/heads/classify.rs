use serde::{Deserialize, Serialize};

use super::{argmax_rows, finetune, FinetuneConfig, FinetuneReport, Trainable};
use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, Features};
use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::par::Exec;
use crate::ssl::softmax_row;
use crate::tensor::{ParamId, ParamStore, Parameterized, Tensor};

/// Which frozen features the probe reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    #[default]
    Cls,
    /// Class token concatenated with the mean patch token.
    ClsMeanPatch,
}

impl FeatureMode {
    pub fn dim(self, embed_dim: usize) -> usize {
        match self {
            FeatureMode::Cls => embed_dim,
            FeatureMode::ClsMeanPatch => 2 * embed_dim,
        }
    }

    pub fn extract(self, f: &Features) -> Vec<f64> {
        match self {
            FeatureMode::Cls => f.cls.clone(),
            FeatureMode::ClsMeanPatch => f.cls.iter().copied().chain(f.mean_patch()).collect(),
        }
    }
}

/// Linear probe: `softmax(f W + b)`. Zero-initialised.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub num_classes: usize,
    pub features: FeatureMode,
    pub params: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl Parameterized for ClassifierHead {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Trainable for ClassifierHead {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }
}

impl ClassifierHead {
    pub fn new(embed_dim: usize, num_classes: usize, features: FeatureMode) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        let mut params = ParamStore::new();
        params.add("linear.weight", Tensor::zeros([features.dim(embed_dim), num_classes]));
        params.add("linear.bias", Tensor::zeros([num_classes]));
        Self::from_params(num_classes, features, params)
    }

    pub fn from_params(num_classes: usize, features: FeatureMode, params: ParamStore) -> Result<Self> {
        let (w, b) = match (params.id("linear.weight"), params.id("linear.bias")) {
            (Some(w), Some(b)) if params.len() == 2 => (w, b),
            _ => return Err(Error::Config("classifier parameters must be `linear.weight` and `linear.bias`".into())),
        };
        let shape = params.get(w).shape().to_vec();
        if shape.len() != 2 || shape[1] != num_classes || params.get(b).shape() != [num_classes] {
            return Err(Error::Config(format!("classifier weights {shape:?} do not match {num_classes} classes")));
        }
        Ok(Self {
            num_classes,
            features,
            params,
            w,
            b,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.params.get(self.w).shape()[0]
    }

    /// `rows x C` logits from a `rows x in_dim` feature node.
    pub fn logits(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let w = g.param(&self.params, self.w);
        let b = g.param(&self.params, self.b);
        let y = g.matmul(f, w)?;
        g.add_row(y, b)
    }

    pub fn probs_from_features(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.in_dim() {
            return Err(dim_err!("classifier expects {} features, got {}", self.in_dim(), f.len()));
        }
        let (w, b) = (self.params.get(self.w).data(), self.params.get(self.b).data());
        let c = self.num_classes;
        let z: Vec<f64> = (0..c).map(|k| b[k] + f.iter().enumerate().map(|(i, x)| x * w[i * c + k]).sum::<f64>()).collect();
        Ok(softmax_row(&z))
    }

    /// Class distribution for one image.
    pub fn classify(&self, backbone: &Backbone, image: &Image) -> Result<Vec<f64>> {
        let f = self.features.extract(&backbone.encode(image)?);
        self.probs_from_features(&f)
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(features.len());
        for f in features {
            out.extend(argmax_rows(&self.probs_from_features(f)?, self.num_classes));
        }
        Ok(out)
    }

    /// Frozen features for every image, in order.
    pub fn features_of(&self, backbone: &Backbone, images: &[Image], exec: Exec) -> Result<Vec<Vec<f64>>> {
        let mode = self.features;
        Ok(backbone.encode_batch(images, exec)?.iter().map(|f| mode.extract(f)).collect())
    }

    /// Cross-entropy training on precomputed features.
    pub fn fit(&mut self, backbone: &Backbone, features: &[Vec<f64>], labels: &[usize], config: &FinetuneConfig, exec: Exec) -> Result<FinetuneReport> {
        if features.len() != labels.len() {
            return Err(Error::Input(format!("{} feature rows for {} labels", features.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Input(format!("label {l} but the head has {} classes", self.num_classes)));
        }
        let d = self.in_dim();
        if let Some(f) = features.iter().find(|f| f.len() != d) {
            return Err(dim_err!("feature row of length {} for a {d}-input head", f.len()));
        }
        finetune(self, backbone, features.len(), config, exec, |g, h, i| h.loss(g, &features[i], labels[i]))
    }

    /// Cross-entropy of one feature row against its label.
    pub fn loss(&self, g: &mut Graph, features: &[f64], label: usize) -> Result<Var> {
        let c = self.num_classes;
        let f = g.constant_from(vec![1, features.len()], features.to_vec())?;
        let z = self.logits(g, f)?;
        let p = g.softmax(z, 1)?;
        let mut t = vec![0.0; c];
        t[label] = 1.0;
        let t = g.constant_from(vec![1, c], t)?;
        g.cross_entropy(t, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ModelConfig, Preset};

    #[test]
    fn zero_head_is_uniform() {
        let h = ClassifierHead::new(4, 3, FeatureMode::Cls).unwrap();
        let p = h.probs_from_features(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(h.probs_from_features(&[1.0]).is_err());
    }

    #[test]
    fn logits_match_closed_form_and_batch_independent() {
        let mut bb = Backbone::new(ModelConfig::preset(Preset::Tiny), 1).unwrap();
        bb.freeze();
        let mut h = ClassifierHead::new(64, 2, FeatureMode::ClsMeanPatch).unwrap();
        let mut r = crate::rng::CounterRng::new(2);
        let w = h.w;
        *h.params.get_mut(w) = Tensor::randn([64, 2], 1.0, &mut r);
        let imgs: Vec<Image> = (0..3).map(|i| Image::from_fn(32, 32, |y, x, c| ((y * i + x + c) % 7) as f64 / 7.0)).collect();
        let all = h.features_of(&bb, &imgs, Exec::Parallel).unwrap();
        let one = h.features_of(&bb, &imgs[1..2], Exec::Sequential).unwrap();
        assert_eq!(all[1], one[0]);
        assert_eq!(h.classify(&bb, &imgs[1]).unwrap(), h.probs_from_features(&all[1]).unwrap());
    }

    #[test]
    fn memorises_single_sample() {
        let mut bb = Backbone::new(ModelConfig::preset(Preset::Tiny), 1).unwrap();
        bb.freeze();
        let mut h = ClassifierHead::new(32, 3, FeatureMode::Cls).unwrap();
        let img = Image::from_fn(32, 32, |y, x, _| ((x + y) % 5) as f64 / 5.0);
        let f = h.features_of(&bb, std::slice::from_ref(&img), Exec::Sequential).unwrap();
        let cfg = FinetuneConfig { steps: 50, batch: 1, ..Default::default() };
        h.fit(&bb, &f, &[2], &cfg, Exec::Sequential).unwrap();
        assert_eq!(h.predict(&f).unwrap(), vec![2]);
    }
}

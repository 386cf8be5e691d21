use std::sync::Arc;

use super::{argmax_rows, finetune, fuse, FinetuneConfig, FinetuneReport, Trainable};
use crate::adapter::{AdaptedOutput, Adapter};
use crate::autograd::{Graph, Var};
use crate::backbone::{bilinear_mix, Backbone};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par::Exec;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Adapter plus a per-cell linear classifier on the fused 1/8-scale
/// features; logits are bilinearly upsampled to pixels.
#[derive(Clone, Debug)]
pub struct SegmentModel {
    pub num_classes: usize,
    pub adapter: Adapter,
    pub params: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl Trainable for SegmentModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.adapter.params, &self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.adapter.params, &mut self.params]
    }
}

impl SegmentModel {
    pub fn new(adapter: Adapter, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("segmentation needs at least one class".into()));
        }
        let mut params = ParamStore::new();
        params.add("classifier.weight", Tensor::zeros([adapter.embed_dim(), num_classes]));
        params.add("classifier.bias", Tensor::zeros([num_classes]));
        Self::from_params(adapter, num_classes, params)
    }

    pub fn from_params(adapter: Adapter, num_classes: usize, params: ParamStore) -> Result<Self> {
        let (w, b) = match (params.id("classifier.weight"), params.id("classifier.bias")) {
            (Some(w), Some(b)) if params.len() == 2 => (w, b),
            _ => return Err(Error::Config("segmentation head needs `classifier.weight` and `classifier.bias`".into())),
        };
        if params.get(w).shape() != [adapter.embed_dim(), num_classes] || params.get(b).shape() != [num_classes] {
            return Err(Error::Config("segmentation head shapes do not match the adapter width and class count".into()));
        }
        Ok(Self {
            num_classes,
            adapter,
            params,
            w,
            b,
        })
    }

    /// Cell logits `(H/8 * W/8) x C` and the adapter output.
    pub fn cell_logits(&self, g: &mut Graph, backbone: &Backbone, image: &Image) -> Result<(Var, AdaptedOutput)> {
        let out = self.adapter.forward(g, backbone, image)?;
        let shape = out.pyramid.shapes[0];
        let x = fuse(g, out.maps[0], shape, out.backbone.patches, out.backbone.grid)?;
        let w = g.param(&self.params, self.w);
        let b = g.param(&self.params, self.b);
        let z = g.matmul(x, w)?;
        Ok((g.add_row(z, b)?, out))
    }

    /// Pixel logits `(H * W) x C`.
    pub fn pixel_logits(&self, g: &mut Graph, backbone: &Backbone, image: &Image) -> Result<Var> {
        let (z, out) = self.cell_logits(g, backbone, image)?;
        let (h, w) = out.pyramid.shapes[0];
        g.row_mix(z, Arc::new(bilinear_mix(h, w, image.height(), image.width())))
    }

    /// Per-pixel label map, row-major, same extent as `image`.
    pub fn segment(&self, backbone: &Backbone, image: &Image) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let z = self.pixel_logits(&mut g, backbone, image)?;
        Ok(argmax_rows(g.value(z), self.num_classes))
    }

    pub fn segment_batch(&self, backbone: &Backbone, images: &[Image], exec: Exec) -> Result<Vec<Vec<usize>>> {
        exec.try_map(images, |img| self.segment(backbone, img))
    }

    /// Pixel-wise cross-entropy against `labels` (row-major label maps).
    pub fn fit(&mut self, backbone: &Backbone, images: &[Image], labels: &[Vec<usize>], config: &FinetuneConfig, exec: Exec) -> Result<FinetuneReport> {
        if images.len() != labels.len() {
            return Err(Error::Input(format!("{} images for {} label maps", images.len(), labels.len())));
        }
        let c = self.num_classes;
        for (img, l) in images.iter().zip(labels) {
            if l.len() != img.height() * img.width() {
                return Err(Error::Input(format!("label map of {} pixels for a {}x{} image", l.len(), img.height(), img.width())));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= c) {
                return Err(Error::Input(format!("label {bad} but the head has {c} classes")));
            }
        }
        finetune(self, backbone, images.len(), config, exec, |g, m: &SegmentModel, i| {
            m.loss(g, backbone, &images[i], &labels[i])
        })
    }

    /// Mean pixel cross-entropy of one image against its label map.
    pub fn loss(&self, g: &mut Graph, backbone: &Backbone, image: &Image, labels: &[usize]) -> Result<Var> {
        let c = self.num_classes;
        let z = self.pixel_logits(g, backbone, image)?;
        let p = g.softmax(z, 1)?;
        let mut t = vec![0.0; labels.len() * c];
        for (k, &l) in labels.iter().enumerate() {
            t[k * c + l] = 1.0;
        }
        let t = g.constant_from(vec![labels.len(), c], t)?;
        g.cross_entropy(t, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::backbone::{ModelConfig, Preset};

    fn setup(classes: usize) -> (Backbone, SegmentModel) {
        let mut bb = Backbone::new(ModelConfig::preset(Preset::Tiny), 1).unwrap();
        bb.freeze();
        let ad = Adapter::new(AdapterConfig::default(), &bb, 2).unwrap();
        (bb, SegmentModel::new(ad, classes).unwrap())
    }

    #[test]
    fn single_class_map_is_constant_and_full_size() {
        let (bb, m) = setup(1);
        let img = Image::from_fn(64, 96, |y, x, c| ((x * 3 + y + c) % 9) as f64 / 9.0);
        let map = m.segment(&bb, &img).unwrap();
        assert_eq!(map.len(), 64 * 96);
        assert!(map.iter().all(|&v| v == 0));
    }

    #[test]
    fn training_leaves_backbone_untouched() {
        let (bb, mut m) = setup(2);
        let img = Image::from_fn(64, 64, |y, x, _| if (x / 16 + y / 16) % 2 == 0 { 0.9 } else { 0.1 });
        let labels: Vec<usize> = (0..64 * 64).map(|k| ((k % 64) / 16 + (k / 64) / 16) % 2).collect();
        let before = bb.checksum();
        let cfg = FinetuneConfig { steps: 3, batch: 1, ..Default::default() };
        let rep = m.fit(&bb, &[img], &[labels], &cfg, Exec::Sequential).unwrap();
        assert_eq!(rep.backbone_before, before);
        assert_eq!(rep.backbone_after, bb.checksum());
        assert!(m.params.checksum() != SegmentModel::new(m.adapter.clone(), 2).unwrap().params.checksum());
    }
}

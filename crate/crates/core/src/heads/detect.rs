use serde::{Deserialize, Serialize};

use super::{finetune, fuse, FinetuneConfig, FinetuneReport, Trainable};
use crate::adapter::{Adapter, LEVEL_STRIDES};
use crate::autograd::{Graph, Var};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{iou_box, BBox, Detection};
use crate::par::Exec;
use crate::tensor::{ParamId, ParamStore, Tensor};

const STRIDE: usize = LEVEL_STRIDES[0];
/// Objectness bias at init, `sigmoid(-4) ~ 0.018`.
const PRIOR_BIAS: f64 = -4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

impl ScoredBox {
    pub fn to_detection(&self, image_id: &str) -> Detection {
        Detection {
            image_id: image_id.to_string(),
            class: self.class,
            score: self.score,
            bbox: self.bbox,
        }
    }
}

/// Greedy non-maximum suppression. Visits boxes by descending score (ties
/// to the lower index) and drops any box whose IoU with a kept box exceeds
/// `iou_thresh`. Returns kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou_box(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Anchor-free detector on the fused 1/8-scale features: per cell, one
/// objectness logit per class and softplus distances (in strides) from the
/// cell centre to the left, top, right and bottom box edges.
#[derive(Clone, Debug)]
pub struct DetectModel {
    pub num_classes: usize,
    pub adapter: Adapter,
    pub params: ParamStore,
    obj: (ParamId, ParamId),
    reg: (ParamId, ParamId),
}

impl Trainable for DetectModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.adapter.params, &self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.adapter.params, &mut self.params]
    }
}

/// Per-cell training targets.
struct CellTargets {
    /// `cells x C` one-hot objectness.
    obj: Vec<f64>,
    positives: Vec<usize>,
    /// `positives x 4` distances in strides.
    dist: Vec<f64>,
}

fn cell_center(k: usize, gw: usize) -> (f64, f64) {
    let s = STRIDE as f64;
    (((k % gw) as f64 + 0.5) * s, ((k / gw) as f64 + 0.5) * s)
}

fn targets(boxes: &[(BBox, usize)], gh: usize, gw: usize, classes: usize) -> CellTargets {
    let n = gh * gw;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let claim = |k: usize, b: usize, owner: &mut Vec<Option<usize>>| match owner[k] {
        Some(o) if boxes[o].0.area() <= boxes[b].0.area() => {}
        _ => owner[k] = Some(b),
    };
    for (b, (bb, _)) in boxes.iter().enumerate() {
        let mut any = false;
        for k in 0..n {
            let (cx, cy) = cell_center(k, gw);
            if cx > bb.x_min && cx < bb.x_max && cy > bb.y_min && cy < bb.y_max {
                claim(k, b, &mut owner);
                any = true;
            }
        }
        if !any {
            // Box too small to cover a cell centre: use the cell holding its centre.
            let x = ((bb.x_min + bb.x_max) / 2.0 / STRIDE as f64).floor().clamp(0.0, (gw - 1) as f64) as usize;
            let y = ((bb.y_min + bb.y_max) / 2.0 / STRIDE as f64).floor().clamp(0.0, (gh - 1) as f64) as usize;
            claim(y * gw + x, b, &mut owner);
        }
    }
    let mut obj = vec![0.0; n * classes];
    let mut positives = Vec::new();
    let mut dist = Vec::new();
    let s = STRIDE as f64;
    for (k, o) in owner.iter().enumerate() {
        if let Some(b) = *o {
            let (bb, class) = boxes[b];
            let (cx, cy) = cell_center(k, gw);
            obj[k * classes + class] = 1.0;
            positives.push(k);
            dist.extend([(cx - bb.x_min) / s, (cy - bb.y_min) / s, (bb.x_max - cx) / s, (bb.y_max - cy) / s]);
        }
    }
    CellTargets { obj, positives, dist }
}

impl DetectModel {
    pub fn new(adapter: Adapter, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("detection needs at least one class".into()));
        }
        let d = adapter.embed_dim();
        let mut params = ParamStore::new();
        params.add("objectness.weight", Tensor::zeros([d, num_classes]));
        params.add("objectness.bias", Tensor::full([num_classes], PRIOR_BIAS));
        params.add("box.weight", Tensor::zeros([d, 4]));
        params.add("box.bias", Tensor::zeros([4]));
        Self::from_params(adapter, num_classes, params)
    }

    pub fn from_params(adapter: Adapter, num_classes: usize, params: ParamStore) -> Result<Self> {
        let d = adapter.embed_dim();
        let names = ["objectness.weight", "objectness.bias", "box.weight", "box.bias"];
        let shapes = [vec![d, num_classes], vec![num_classes], vec![d, 4], vec![4]];
        let mut ids = Vec::with_capacity(4);
        for (n, s) in names.iter().zip(&shapes) {
            match params.id(n) {
                Some(id) if params.get(id).shape() == s.as_slice() => ids.push(id),
                _ => return Err(Error::Config(format!("detection head needs `{n}` of shape {s:?}"))),
            }
        }
        if params.len() != 4 {
            return Err(Error::Config("detection head has unexpected parameters".into()));
        }
        Ok(Self {
            num_classes,
            adapter,
            params,
            obj: (ids[0], ids[1]),
            reg: (ids[2], ids[3]),
        })
    }

    /// Objectness logits `cells x C`, distances `cells x 4` (strides), grid.
    fn raw(&self, g: &mut Graph, backbone: &Backbone, image: &Image) -> Result<(Var, Var, (usize, usize))> {
        let out = self.adapter.forward(g, backbone, image)?;
        let shape = out.pyramid.shapes[0];
        let x = fuse(g, out.maps[0], shape, out.backbone.patches, out.backbone.grid)?;
        let lin = |g: &mut Graph, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let w = g.param(&self.params, w);
            let b = g.param(&self.params, b);
            let z = g.matmul(x, w)?;
            g.add_row(z, b)
        };
        let obj = lin(g, self.obj)?;
        let reg = lin(g, self.reg)?;
        Ok((obj, g.softplus(reg), shape))
    }

    /// Scored boxes above `score_thresh` after per-class NMS, clipped to
    /// the image, by descending score.
    pub fn detect(&self, backbone: &Backbone, image: &Image, score_thresh: f64, nms_iou: f64) -> Result<Vec<ScoredBox>> {
        let mut g = Graph::new();
        let (obj, dist, (_, gw)) = self.raw(&mut g, backbone, image)?;
        let (z, d) = (g.value(obj), g.value(dist));
        let (w, h) = (image.width() as f64, image.height() as f64);
        let s = STRIDE as f64;
        let mut out = Vec::new();
        for class in 0..self.num_classes {
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for k in 0..z.len() / self.num_classes {
                let score = 1.0 / (1.0 + (-z[k * self.num_classes + class]).exp());
                if score < score_thresh {
                    continue;
                }
                let (cx, cy) = cell_center(k, gw);
                let r = &d[k * 4..k * 4 + 4];
                let b = BBox::new(cx - r[0] * s, cy - r[1] * s, cx + r[2] * s, cy + r[3] * s).clip(w, h);
                if b.is_valid() {
                    boxes.push(b);
                    scores.push(score);
                }
            }
            for i in nms(&boxes, &scores, nms_iou) {
                out.push(ScoredBox {
                    bbox: boxes[i],
                    class,
                    score: scores[i],
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(out)
    }

    pub fn detect_batch(&self, backbone: &Backbone, images: &[Image], score_thresh: f64, nms_iou: f64, exec: Exec) -> Result<Vec<Vec<ScoredBox>>> {
        exec.try_map(images, |img| self.detect(backbone, img, score_thresh, nms_iou))
    }

    /// Binary cross-entropy on objectness over all cells plus squared error
    /// on the distances of positive cells.
    pub fn fit(&mut self, backbone: &Backbone, images: &[Image], boxes: &[Vec<(BBox, usize)>], config: &FinetuneConfig, exec: Exec) -> Result<FinetuneReport> {
        if images.len() != boxes.len() {
            return Err(Error::Input(format!("{} images for {} box sets", images.len(), boxes.len())));
        }
        let c = self.num_classes;
        let mut all = Vec::with_capacity(images.len());
        for (img, bs) in images.iter().zip(boxes) {
            if let Some((_, bad)) = bs.iter().find(|(_, k)| *k >= c) {
                return Err(Error::Input(format!("box class {bad} but the head has {c} classes")));
            }
            let (gh, gw) = (img.height() / STRIDE, img.width() / STRIDE);
            all.push(targets(bs, gh, gw, c));
        }
        finetune(self, backbone, images.len(), config, exec, |g, m: &DetectModel, i| {
            m.loss_with(g, backbone, &images[i], &all[i])
        })
    }

    /// Training loss of one image against its boxes.
    pub fn loss(&self, g: &mut Graph, backbone: &Backbone, image: &Image, boxes: &[(BBox, usize)]) -> Result<Var> {
        if let Some((_, bad)) = boxes.iter().find(|(_, k)| *k >= self.num_classes) {
            return Err(Error::Input(format!("box class {bad} but the head has {} classes", self.num_classes)));
        }
        let t = targets(boxes, image.height() / STRIDE, image.width() / STRIDE, self.num_classes);
        self.loss_with(g, backbone, image, &t)
    }

    fn loss_with(&self, g: &mut Graph, backbone: &Backbone, image: &Image, t: &CellTargets) -> Result<Var> {
        let (obj, dist, _) = self.raw(g, backbone, image)?;
        let y = g.constant_from(g.shape(obj).to_vec(), t.obj.clone())?;
        // BCE with logits: softplus(z) - y z
        let sp = g.softplus(obj);
        let yz = g.mul(y, obj)?;
        let bce = g.sub(sp, yz)?;
        let mut loss = g.mean_all(bce);
        if !t.positives.is_empty() {
            let p = g.gather_rows(dist, &t.positives)?;
            let td = g.constant_from(vec![t.positives.len(), 4], t.dist.clone())?;
            let e = g.sub(p, td)?;
            let e2 = g.mul(e, e)?;
            let l = g.mean_all(e2);
            loss = g.add(loss, l)?;
        }
        Ok(loss)
    }
}

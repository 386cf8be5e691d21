use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::classification::{precision_envelope_ap, ranking};

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }
}

/// Intersection over union; 0 when either box has zero area.
pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub class: usize,
    pub bbox: BBox,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionAp {
    /// Mean over [`IOU_THRESHOLDS`].
    pub ap: f64,
    pub ap50: f64,
    pub per_threshold: Vec<f64>,
    /// AP50 per class id; `None` for classes without ground truth.
    pub per_class_ap50: Vec<Option<f64>>,
    pub notes: Vec<String>,
}

/// Greedy matching of one class: predictions in descending score order
/// (ties by input order) each claim the best-overlapping unmatched ground
/// truth in the same image with IoU >= `threshold`. Returns hit flags in
/// ranked order.
pub(crate) fn match_class(preds: &[&Detection], gts: &[&GroundTruthBox], threshold: f64) -> Vec<bool> {
    let scores: Vec<f64> = preds.iter().map(|d| d.score).collect();
    let mut used = vec![false; gts.len()];
    ranking(&scores)
        .into_iter()
        .map(|i| {
            let d = preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.image_id != d.image_id {
                    continue;
                }
                let iou = iou_box(&d.bbox, &g.bbox);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn ap_at(preds: &[Detection], gts: &[GroundTruthBox], classes: &BTreeSet<usize>, threshold: f64) -> Vec<(usize, f64)> {
    classes
        .iter()
        .map(|&c| {
            let p: Vec<&Detection> = preds.iter().filter(|d| d.class == c).collect();
            let g: Vec<&GroundTruthBox> = gts.iter().filter(|b| b.class == c).collect();
            let hits = match_class(&p, &g, threshold);
            (c, precision_envelope_ap(&hits, g.len()))
        })
        .collect()
}

/// Detection AP averaged over classes with ground truth, per IoU threshold;
/// `ap` averages thresholds 0.50:0.05:0.95 and `ap50` is the 0.5 entry.
///
/// With no ground truth at all the result is 1.0 if there are also no
/// predictions and 0.0 otherwise; both cases are noted.
pub fn detection_ap(preds: &[Detection], gts: &[GroundTruthBox]) -> DetectionAp {
    let mut notes = Vec::new();
    let gt_classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let pred_classes: BTreeSet<usize> = preds.iter().map(|d| d.class).collect();
    let max_class = gt_classes.iter().chain(&pred_classes).max().copied();
    if gts.is_empty() {
        let v = if preds.is_empty() {
            notes.push("no ground truth and no predictions: AP defined as 1.0 by convention".into());
            1.0
        } else {
            notes.push("no ground truth: every prediction is a false positive".into());
            0.0
        };
        return DetectionAp {
            ap: v,
            ap50: v,
            per_threshold: vec![v; IOU_THRESHOLDS.len()],
            per_class_ap50: vec![None; max_class.map_or(0, |m| m + 1)],
            notes,
        };
    }
    for c in pred_classes.difference(&gt_classes) {
        notes.push(format!("class {c} has predictions but no ground truth; excluded"));
    }
    let mut per_threshold = Vec::with_capacity(IOU_THRESHOLDS.len());
    let mut per_class_ap50 = vec![None; max_class.map_or(0, |m| m + 1)];
    for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
        let per_class: BTreeMap<usize, f64> = ap_at(preds, gts, &gt_classes, thr).into_iter().collect();
        if t == 0 {
            for (&c, &v) in &per_class {
                per_class_ap50[c] = Some(v);
            }
        }
        per_threshold.push(per_class.values().sum::<f64>() / per_class.len() as f64);
    }
    DetectionAp {
        ap: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        ap50: per_threshold[0],
        per_threshold,
        per_class_ap50,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(img: &str, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            image_id: img.into(),
            class: 0,
            score,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    fn gt(img: &str, b: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox {
            image_id: img.into(),
            class: 0,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou_box(&a, &a), 1.0);
        assert!((iou_box(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou_box(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou_box(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)), 0.0);
    }

    #[test]
    fn detection_ap_examples() {
        let g = [gt("a", [0.0, 0.0, 10.0, 10.0])];
        let r = detection_ap(&[det("a", 0.9, [0.0, 0.0, 10.0, 10.0])], &g);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap, 1.0);

        let r = detection_ap(
            &[det("a", 0.95, [50.0, 50.0, 60.0, 60.0]), det("a", 0.9, [0.0, 0.0, 10.0, 10.0])],
            &g,
        );
        assert_eq!(r.ap50, 0.5);

        let r = detection_ap(&[], &g);
        assert_eq!(r.ap, 0.0);

        let r = detection_ap(&[], &[]);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.notes.len(), 1);
    }

    #[test]
    fn ground_truth_matched_at_most_once() {
        let g = [gt("a", [0.0, 0.0, 10.0, 10.0])];
        let r = detection_ap(
            &[det("a", 0.9, [0.0, 0.0, 10.0, 10.0]), det("a", 0.8, [0.0, 0.0, 10.0, 10.0])],
            &g,
        );
        assert_eq!(r.ap50, 1.0); // the duplicate is an FP ranked after the only TP
        let p: Vec<Detection> = vec![det("a", 0.8, [0.0, 0.0, 10.0, 10.0]), det("b", 0.9, [0.0, 0.0, 10.0, 10.0])];
        let r = detection_ap(&p, &g);
        assert_eq!(r.ap50, 0.5); // box in image b cannot match image a
    }

    #[test]
    fn localization_quality_lowers_strict_thresholds() {
        let g = [gt("a", [0.0, 0.0, 10.0, 10.0])];
        // IoU = 0.8
        let r = detection_ap(&[det("a", 0.9, [0.0, 0.0, 10.0, 8.0])], &g);
        assert_eq!(r.ap50, 1.0);
        let expected: f64 = IOU_THRESHOLDS.iter().map(|&t| if 0.8 >= t - 1e-12 { 1.0 } else { 0.0 }).sum::<f64>() / 10.0;
        assert!((r.ap - expected).abs() < 1e-12);
    }
}

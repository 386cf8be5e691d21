use crate::error::{Error, Result};

use super::mean_defined;

/// Pixel confusion matrix, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Validation(format!(
                "label maps differ in size: {} vs {}",
                gt.len(),
                pred.len()
            )));
        }
        let c = self.num_classes;
        for (&g, &p) in gt.iter().zip(pred) {
            if g >= c || p >= c {
                return Err(Error::Validation(format!("label {} outside {c} classes", g.max(p))));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn per_class(&self) -> ConfusionCounts {
        let c = self.num_classes;
        let total = self.total();
        let mut out = ConfusionCounts {
            tp: vec![0; c],
            fp: vec![0; c],
            fn_: vec![0; c],
            tn: vec![0; c],
        };
        for i in 0..c {
            let tp = self.get(i, i);
            let row: u64 = (0..c).map(|j| self.get(i, j)).sum();
            let col: u64 = (0..c).map(|j| self.get(j, i)).sum();
            out.tp[i] = tp;
            out.fn_[i] = row - tp;
            out.fp[i] = col - tp;
            out.tn[i] = total + tp - row - col;
        }
        out
    }
}

/// Per-class one-vs-rest counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AccuracyMode {
    /// `TP / (TP + FN)`, matching the per-class accuracy tables.
    #[default]
    Recall,
    /// `(TP + TN) / (TP + TN + FP + FN)`.
    WithTrueNegatives,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMetrics {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub acc: Vec<Option<f64>>,
    pub macc: f64,
    /// Classes absent from both ground truth and prediction.
    pub excluded: Vec<usize>,
}

impl SegmentationMetrics {
    pub fn from_confusion(cm: &ConfusionMatrix, mode: AccuracyMode) -> Result<Self> {
        let k = cm.per_class();
        let c = cm.num_classes;
        let mut iou = vec![None; c];
        let mut acc = vec![None; c];
        let mut excluded = Vec::new();
        for i in 0..c {
            let (tp, fp, fn_, tn) = (k.tp[i], k.fp[i], k.fn_[i], k.tn[i]);
            if tp + fp + fn_ == 0 {
                excluded.push(i);
                continue;
            }
            iou[i] = Some(tp as f64 / (tp + fp + fn_) as f64);
            acc[i] = match mode {
                AccuracyMode::Recall => (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
                AccuracyMode::WithTrueNegatives => Some((tp + tn) as f64 / (tp + tn + fp + fn_) as f64),
            };
        }
        let miou = mean_defined(&iou).ok_or_else(|| Error::Validation("no class present in ground truth or prediction".into()))?;
        let macc = mean_defined(&acc).ok_or_else(|| Error::Validation("no class present in ground truth".into()))?;
        Ok(Self {
            iou,
            miou,
            acc,
            macc,
            excluded,
        })
    }
}

/// IoU per class `TP / (TP + FP + FN)`, its mean, per-class accuracy and its
/// mean. Classes absent from both maps are excluded from the means.
pub fn seg_miou_macc(gt: &[usize], pred: &[usize], num_classes: usize, mode: AccuracyMode) -> Result<SegmentationMetrics> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(gt, pred)?;
    SegmentationMetrics::from_confusion(&cm, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let gt = [0, 0, 0, 1];
        let m = seg_miou_macc(&gt, &gt, 2, AccuracyMode::Recall).unwrap();
        assert_eq!((m.miou, m.macc), (1.0, 1.0));

        let m = seg_miou_macc(&gt, &[0, 0, 1, 1], 2, AccuracyMode::Recall).unwrap();
        assert_eq!(m.iou, vec![Some(2.0 / 3.0), Some(0.5)]);
        assert_eq!(m.miou, (2.0 / 3.0 + 0.5) / 2.0);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.acc, vec![Some(2.0 / 3.0), Some(1.0)]);
        assert!((m.macc - 5.0 / 6.0).abs() < 1e-15);

        let m = seg_miou_macc(&[0, 0], &[1, 1], 2, AccuracyMode::Recall).unwrap();
        assert_eq!(m.miou, 0.0);
    }

    #[test]
    fn absent_class_and_tn_variant() {
        let m = seg_miou_macc(&[0, 1], &[0, 1], 3, AccuracyMode::Recall).unwrap();
        assert_eq!(m.excluded, vec![2]);
        let m = seg_miou_macc(&[0, 0, 0, 1], &[0, 0, 1, 1], 2, AccuracyMode::WithTrueNegatives).unwrap();
        assert_eq!(m.acc, vec![Some(0.75), Some(0.75)]);
        assert!(seg_miou_macc(&[0, 3], &[0, 0], 2, AccuracyMode::Recall).is_err());
    }
}

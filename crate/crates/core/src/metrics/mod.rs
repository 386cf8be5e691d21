//! Evaluation metrics for classification, detection, counting and
//! segmentation, plus the line-oriented prediction interchange formats.
//!
//! Undefined per-class quantities (a class with no ground truth, say) are
//! excluded from means and reported as `None` rather than coerced to 0.

mod classification;
mod counting;
mod detection;
pub mod io;
mod segmentation;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use classification::{
    average_precision, balanced_accuracy, classification_map, precision_envelope_ap,
    BalancedAccuracy, ClassificationMap,
};
pub use counting::{counting_errors, CountingErrors};
pub use detection::{detection_ap, iou_box, BBox, Detection, DetectionAp, GroundTruthBox, IOU_THRESHOLDS};
pub use segmentation::{seg_miou_macc, AccuracyMode, ConfusionCounts, ConfusionMatrix, SegmentationMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Detection,
    Counting,
    Segmentation,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Detection => "detection",
            TaskKind::Counting => "counting",
            TaskKind::Segmentation => "segmentation",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "classification" | "classify" => Ok(TaskKind::Classification),
            "detection" | "detect" => Ok(TaskKind::Detection),
            "counting" | "count" => Ok(TaskKind::Counting),
            "segmentation" | "segment" => Ok(TaskKind::Segmentation),
            other => Err(crate::Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Named metric values for one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub per_class: BTreeMap<String, Vec<Option<f64>>>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            metrics: BTreeMap::new(),
            per_class: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    /// Every ratio metric in its valid range: [0, 1] for accuracies, AP and
    /// IoU; R^2 at most 1; errors non-negative.
    pub fn check_ranges(&self) -> Result<(), String> {
        for (k, &v) in &self.metrics {
            let ok = match k.as_str() {
                "r2" => v <= 1.0 + 1e-12,
                "mae" | "rmse" => v >= 0.0,
                _ => (0.0..=1.0).contains(&v),
            };
            if !ok || !v.is_finite() {
                return Err(format!("metric {k} = {v} out of range"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `mean (± std)` over repeated runs, in percent, as in the reduced-data
/// tables: one decimal for the mean, two for the sample standard deviation.
pub fn format_mean_std(values: &[f64]) -> String {
    let (mean, std) = mean_std(values);
    // round first so tiny negatives do not print as "-0.0"
    let m = (mean * 1000.0).round() / 10.0 + 0.0;
    format!("{m:.1} (± {:.2})", std * 100.0)
}

/// Mean and sample (n - 1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub(crate) fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

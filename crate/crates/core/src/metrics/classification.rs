use crate::error::{Error, Result};

use super::mean_defined;

#[derive(Clone, Debug, PartialEq)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// Recall per class; `None` for classes absent from the ground truth.
    pub per_class_recall: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Mean per-class recall `TP_i / (TP_i + FN_i)` over classes that occur in
/// `labels`. Classes without ground-truth samples are excluded and listed.
pub fn balanced_accuracy(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<BalancedAccuracy> {
    if labels.len() != predictions.len() {
        return Err(Error::Validation(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut tp = vec![0u64; num_classes];
    let mut support = vec![0u64; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= num_classes || p >= num_classes {
            return Err(Error::Validation(format!(
                "label {y} / prediction {p} outside {num_classes} classes"
            )));
        }
        support[y] += 1;
        if y == p {
            tp[y] += 1;
        }
    }
    let per_class_recall: Vec<Option<f64>> = (0..num_classes)
        .map(|c| (support[c] > 0).then(|| tp[c] as f64 / support[c] as f64))
        .collect();
    let excluded = (0..num_classes).filter(|&c| support[c] == 0).collect();
    let value = mean_defined(&per_class_recall)
        .ok_or_else(|| Error::Validation("no class has ground-truth samples".into()))?;
    Ok(BalancedAccuracy {
        value,
        per_class_recall,
        excluded,
    })
}

/// Indices sorted by descending score; ties keep the lower index first.
pub(crate) fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// All-point interpolated AP for a ranked hit list against `num_positive`
/// ground-truth items: the sum over recall steps of the precision envelope
/// (maximum precision at any equal or deeper rank).
pub fn precision_envelope_ap(ranked_hits: &[bool], num_positive: usize) -> f64 {
    if num_positive == 0 {
        return 0.0;
    }
    let n = ranked_hits.len();
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &hit) in ranked_hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..n.saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let step = 1.0 / num_positive as f64;
    ranked_hits
        .iter()
        .zip(&precision)
        .filter(|(&hit, _)| hit)
        .map(|(_, p)| p * step)
        .sum()
}

/// AP of one binary ranking problem; `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let num_positive = positive.iter().filter(|&&p| p).count();
    if num_positive == 0 {
        return None;
    }
    let hits: Vec<bool> = ranking(scores).into_iter().map(|i| positive[i]).collect();
    Some(precision_envelope_ap(&hits, num_positive))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMap {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub excluded: Vec<usize>,
}

/// One-vs-rest AP per class from per-sample score vectors, and their mean.
pub fn classification_map(scores: &[Vec<f64>], labels: &[usize]) -> Result<ClassificationMap> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} score vectors vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|s| s.len() != k) {
        return Err(Error::Validation("score vectors differ in length".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Validation(format!("label {bad} outside {k} classes")));
    }
    let per_class_ap: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|v| v[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            average_precision(&s, &pos)
        })
        .collect();
    let excluded = (0..k).filter(|&c| per_class_ap[c].is_none()).collect();
    let map = mean_defined(&per_class_ap)
        .ok_or_else(|| Error::Validation("no class has positive samples".into()))?;
    Ok(ClassificationMap {
        per_class_ap,
        map,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_examples() {
        let y = [0, 1, 2, 1];
        assert_eq!(balanced_accuracy(&y, &y, 3).unwrap().value, 1.0);
        // class 0 recall 1.0, class 1 recall 0.5
        let ba = balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 1, 0], 2).unwrap();
        assert_eq!(ba.value, 0.75);
        let ba = balanced_accuracy(&[0, 1], &[1, 0], 2).unwrap();
        assert_eq!(ba.value, 0.0);
    }

    #[test]
    fn absent_class_is_excluded() {
        let ba = balanced_accuracy(&[0, 0, 1], &[0, 2, 1], 3).unwrap();
        assert_eq!(ba.excluded, vec![2]);
        assert_eq!(ba.per_class_recall[2], None);
        assert_eq!(ba.value, 0.75);
        assert!(balanced_accuracy(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.2], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.9, 0.2], &[false, false]), None);
        // ties broken by index: the negative at index 0 ranks first
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
    }

    #[test]
    fn map_excludes_classes_without_positives() {
        let scores = vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0]];
        let m = classification_map(&scores, &[0, 1]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.excluded, vec![2]);
    }
}

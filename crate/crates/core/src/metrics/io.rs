//! Line-oriented prediction / ground-truth interchange files.
//!
//! All text formats are whitespace-separated, one record per line; blank
//! lines and lines starting with `#` are ignored.
//!
//! | kind | fields |
//! |------|--------|
//! | classification | `sample_id score_0 .. score_{k-1} label` |
//! | detection predictions | `image_id class score x_min y_min x_max y_max` |
//! | detection ground truth | `image_id class x_min y_min x_max y_max` |
//! | counting (predictions or ground truth) | `image_id count` |
//!
//! Segmentation uses two directories of 8-bit single-channel PNG label maps
//! paired by file name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{
    balanced_accuracy, classification_map, counting_errors, detection_ap, AccuracyMode, BBox,
    ConfusionMatrix, Detection, GroundTruthBox, MetricReport, SegmentationMetrics, TaskKind,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationRecord {
    pub sample_id: String,
    pub scores: Vec<f64>,
    pub label: usize,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

pub(crate) fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub(crate) fn num<T: std::str::FromStr>(path: &Path, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} `{tok}`")))
}

pub fn parse_classification(path: &Path, text: &str) -> Result<Vec<ClassificationRecord>> {
    let mut out = Vec::new();
    for (line, f) in records(text) {
        if f.len() < 3 {
            return Err(parse_err(path, line, "expected `sample_id score.. label`"));
        }
        let scores = f[1..f.len() - 1]
            .iter()
            .map(|t| num(path, line, t, "score"))
            .collect::<Result<Vec<f64>>>()?;
        out.push(ClassificationRecord {
            sample_id: f[0].to_string(),
            scores,
            label: num(path, line, f[f.len() - 1], "label")?,
        });
    }
    if let Some(k) = out.first().map(|r| r.scores.len()) {
        if out.iter().any(|r| r.scores.len() != k) {
            return Err(parse_err(path, 0, "records have different numbers of scores"));
        }
    }
    Ok(out)
}

pub fn parse_detections(path: &Path, text: &str) -> Result<Vec<Detection>> {
    records(text)
        .map(|(line, f)| {
            if f.len() != 7 {
                return Err(parse_err(path, line, "expected `image_id class score x_min y_min x_max y_max`"));
            }
            Ok(Detection {
                image_id: f[0].to_string(),
                class: num(path, line, f[1], "class")?,
                score: num(path, line, f[2], "score")?,
                bbox: BBox::new(
                    num(path, line, f[3], "x_min")?,
                    num(path, line, f[4], "y_min")?,
                    num(path, line, f[5], "x_max")?,
                    num(path, line, f[6], "y_max")?,
                ),
            })
        })
        .collect()
}

pub fn parse_ground_truth_boxes(path: &Path, text: &str) -> Result<Vec<GroundTruthBox>> {
    records(text)
        .map(|(line, f)| {
            if f.len() != 6 {
                return Err(parse_err(path, line, "expected `image_id class x_min y_min x_max y_max`"));
            }
            let bbox = BBox::new(
                num(path, line, f[2], "x_min")?,
                num(path, line, f[3], "y_min")?,
                num(path, line, f[4], "x_max")?,
                num(path, line, f[5], "y_max")?,
            );
            if !bbox.is_valid() {
                return Err(parse_err(path, line, "box must satisfy x_min < x_max and y_min < y_max"));
            }
            Ok(GroundTruthBox {
                image_id: f[0].to_string(),
                class: num(path, line, f[1], "class")?,
                bbox,
            })
        })
        .collect()
}

pub fn parse_counts(path: &Path, text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (line, f) in records(text) {
        if f.len() != 2 {
            return Err(parse_err(path, line, "expected `image_id count`"));
        }
        if out.insert(f[0].to_string(), num(path, line, f[1], "count")?).is_some() {
            return Err(parse_err(path, line, format!("duplicate image id `{}`", f[0])));
        }
    }
    Ok(out)
}

pub fn format_classification(records: &[ClassificationRecord]) -> String {
    let mut s = String::from("# sample_id score_0 .. score_{k-1} label\n");
    for r in records {
        s.push_str(&r.sample_id);
        for v in &r.scores {
            let _ = write!(s, " {v}");
        }
        let _ = writeln!(s, " {}", r.label);
    }
    s
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::from("# image_id class score x_min y_min x_max y_max\n");
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(s, "{} {} {} {} {} {} {}", d.image_id, d.class, d.score, b.x_min, b.y_min, b.x_max, b.y_max);
    }
    s
}

pub fn format_ground_truth_boxes(gts: &[GroundTruthBox]) -> String {
    let mut s = String::from("# image_id class x_min y_min x_max y_max\n");
    for g in gts {
        let b = g.bbox;
        let _ = writeln!(s, "{} {} {} {} {} {}", g.image_id, g.class, b.x_min, b.y_min, b.x_max, b.y_max);
    }
    s
}

pub fn format_counts<'a>(counts: impl IntoIterator<Item = (&'a str, f64)>) -> String {
    let mut s = String::from("# image_id count\n");
    for (id, c) in counts {
        let _ = writeln!(s, "{id} {c}");
    }
    s
}

pub fn write_label_map(path: &Path, width: usize, height: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::Validation("label map size does not match extent".into()));
    }
    let bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Validation(format!("label {l} does not fit in 8 bits"))))
        .collect::<Result<Vec<u8>>>()?;
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Validation("label map buffer".into()))?;
    img.save(path)?;
    Ok(())
}

/// Returns `(width, height, labels)`.
pub fn read_label_map(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(usize::from).collect()))
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), p.clone());
            }
        }
    }
    Ok(out)
}

/// Compute a [`MetricReport`] purely from prediction and ground-truth files.
///
/// Classification reads everything from `pred` (`gt` is ignored).
/// Segmentation expects `pred` and `gt` to be directories.
pub fn evaluate_files(task: TaskKind, pred: &Path, gt: Option<&Path>, num_classes: Option<usize>, acc_mode: AccuracyMode) -> Result<MetricReport> {
    let need_gt = || gt.ok_or_else(|| Error::Usage(format!("{} evaluation needs a ground-truth path", task.as_str())));
    let mut report = MetricReport::new(task);
    match task {
        TaskKind::Classification => {
            let recs = parse_classification(pred, &read(pred)?)?;
            if recs.is_empty() {
                return Err(Error::Validation(format!("{} holds no records", pred.display())));
            }
            let k = num_classes.unwrap_or(recs[0].scores.len());
            let labels: Vec<usize> = recs.iter().map(|r| r.label).collect();
            let predicted: Vec<usize> = recs.iter().map(|r| argmax(&r.scores)).collect();
            let ba = balanced_accuracy(&labels, &predicted, k)?;
            let scores: Vec<Vec<f64>> = recs.iter().map(|r| r.scores.clone()).collect();
            let map = classification_map(&scores, &labels)?;
            report.set("ba", ba.value);
            report.set("map", map.map);
            report.per_class.insert("recall".into(), ba.per_class_recall);
            report.per_class.insert("ap".into(), map.per_class_ap);
            for c in ba.excluded {
                report.notes.push(format!("class {c} absent from ground truth; excluded"));
            }
        }
        TaskKind::Detection => {
            let gt = need_gt()?;
            let preds = parse_detections(pred, &read(pred)?)?;
            let gts = parse_ground_truth_boxes(gt, &read(gt)?)?;
            let r = detection_ap(&preds, &gts);
            report.set("ap", r.ap);
            report.set("ap50", r.ap50);
            report.per_class.insert("ap50".into(), r.per_class_ap50);
            report.notes.extend(r.notes);
        }
        TaskKind::Counting => {
            let gt = need_gt()?;
            let p = parse_counts(pred, &read(pred)?)?;
            let g = parse_counts(gt, &read(gt)?)?;
            let mut y = Vec::with_capacity(g.len());
            let mut y_hat = Vec::with_capacity(g.len());
            for (id, &v) in &g {
                let pv = p
                    .get(id)
                    .ok_or_else(|| Error::Validation(format!("no prediction for image `{id}`")))?;
                y.push(v);
                y_hat.push(*pv);
            }
            let e = counting_errors(&y, &y_hat)?;
            report.set("mae", e.mae);
            report.set("rmse", e.rmse);
            match e.r2 {
                Some(r2) => report.set("r2", r2),
                None => report.notes.push("ground-truth counts are constant; R^2 undefined".into()),
            }
        }
        TaskKind::Segmentation => {
            let gt = need_gt()?;
            let gfiles = png_files(gt)?;
            let pfiles = png_files(pred)?;
            let mut maps = Vec::new();
            let mut max_label = 0;
            for (name, gpath) in &gfiles {
                let ppath = pfiles
                    .get(name)
                    .ok_or_else(|| Error::Validation(format!("no predicted label map for `{name}`")))?;
                let (gw, gh, gl) = read_label_map(gpath)?;
                let (pw, ph, pl) = read_label_map(ppath)?;
                if (gw, gh) != (pw, ph) {
                    return Err(Error::Validation(format!("`{name}`: extents {gw}x{gh} vs {pw}x{ph}")));
                }
                max_label = max_label.max(gl.iter().chain(&pl).copied().max().unwrap_or(0));
                maps.push((gl, pl));
            }
            let k = num_classes.unwrap_or(max_label + 1);
            let mut cm = ConfusionMatrix::new(k);
            for (g, p) in &maps {
                cm.accumulate(g, p)?;
            }
            let m = SegmentationMetrics::from_confusion(&cm, acc_mode)?;
            report.set("miou", m.miou);
            report.set("macc", m.macc);
            report.per_class.insert("iou".into(), m.iou);
            report.per_class.insert("acc".into(), m.acc);
            for c in m.excluded {
                report.notes.push(format!("class {c} absent from ground truth and prediction; excluded"));
            }
        }
    }
    Ok(report)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_roundtrip_and_eval() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            ClassificationRecord { sample_id: "a".into(), scores: vec![0.9, 0.1], label: 0 },
            ClassificationRecord { sample_id: "b".into(), scores: vec![0.2, 0.8], label: 1 },
        ];
        let text = format_classification(&recs);
        let p = dir.path().join("cls.txt");
        fs::write(&p, &text).unwrap();
        assert_eq!(parse_classification(&p, &text).unwrap(), recs);
        let r = evaluate_files(TaskKind::Classification, &p, None, None, AccuracyMode::Recall).unwrap();
        assert_eq!(r.get("ba"), Some(1.0));
        assert_eq!(r.get("map"), Some(1.0));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let p = Path::new("x.txt");
        let err = parse_detections(p, "# header\na 0 0.5 1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_counts(p, "a 1\na 2\n").is_err());
        assert!(parse_ground_truth_boxes(p, "a 0 5 5 1 1\n").is_err());
    }

    #[test]
    fn segmentation_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let (g, p) = (dir.path().join("gt"), dir.path().join("pred"));
        fs::create_dir_all(&g).unwrap();
        fs::create_dir_all(&p).unwrap();
        write_label_map(&g.join("0.png"), 2, 2, &[0, 0, 0, 1]).unwrap();
        write_label_map(&p.join("0.png"), 2, 2, &[0, 0, 1, 1]).unwrap();
        let r = evaluate_files(TaskKind::Segmentation, &p, Some(&g), None, AccuracyMode::Recall).unwrap();
        assert!((r.get("miou").unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert!((r.get("macc").unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }
}

//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use wheatvit::metrics::{BBox, Detection, GroundTruthBox};
use wheatvit::rng::CounterRng;

/// All-point interpolated AP by enumerating every score threshold: for each
/// distinct threshold `t` the predicted set is `{score >= t}`, giving one
/// (recall, precision) point; AP sums recall increments times the best
/// precision at equal or higher recall. Scores must be distinct.
pub fn threshold_ap(scores: &[f64], positive: &[bool]) -> f64 {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
            let tp = sel.iter().filter(|&&i| positive[i]).count() as f64;
            (tp / p, tp / sel.len() as f64)
        })
        .collect();
    envelope_sum(&points)
}

/// `points` are (recall, precision) for thresholds in descending order.
fn envelope_sum(points: &[(f64, f64)]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            let best = points
                .iter()
                .skip(i)
                .filter(|q| q.0 >= r)
                .map(|q| q.1)
                .fold(0.0, f64::max);
            ap += (r - prev_recall) * best;
            prev_recall = r;
        }
    }
    ap
}

/// Detection AP at one IoU threshold, by brute force: every score threshold
/// re-runs greedy matching from scratch on the surviving predictions.
/// Classes are averaged over those with ground truth. Scores must be
/// distinct.
pub fn threshold_detection_ap(preds: &[Detection], gts: &[GroundTruthBox], iou_thresh: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let p: Vec<&Detection> = preds.iter().filter(|d| d.class == c).collect();
        let g: Vec<&GroundTruthBox> = gts.iter().filter(|b| b.class == c).collect();
        let mut thresholds: Vec<f64> = p.iter().map(|d| d.score).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        let points: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&t| {
                let mut kept: Vec<&Detection> = p.iter().copied().filter(|d| d.score >= t).collect();
                kept.sort_by(|a, b| b.score.total_cmp(&a.score));
                let mut used = vec![false; g.len()];
                let mut tp = 0.0;
                for d in &kept {
                    let mut best = None;
                    let mut best_iou = 0.0;
                    for (j, gt) in g.iter().enumerate() {
                        if used[j] || gt.image_id != d.image_id {
                            continue;
                        }
                        let v = raster_free_iou(&d.bbox, &gt.bbox);
                        if v >= iou_thresh && v > best_iou {
                            best = Some(j);
                            best_iou = v;
                        }
                    }
                    if let Some(j) = best {
                        used[j] = true;
                        tp += 1.0;
                    }
                }
                (tp / g.len() as f64, tp / kept.len() as f64)
            })
            .collect();
        total += envelope_sum(&points);
    }
    total / classes.len() as f64
}

/// Closed-form IoU written independently of the library.
fn raster_free_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let i = w * h;
    let area = |r: &BBox| (r.x_max - r.x_min).max(0.0) * (r.y_max - r.y_min).max(0.0);
    let u = area(a) + area(b) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

/// IoU by counting cell centres of a `step`-spaced grid inside each box.
pub fn raster_iou(a: &BBox, b: &BBox, step: f64) -> f64 {
    let lo_x = a.x_min.min(b.x_min);
    let lo_y = a.y_min.min(b.y_min);
    let nx = ((a.x_max.max(b.x_max) - lo_x) / step).ceil() as usize;
    let ny = ((a.y_max.max(b.y_max) - lo_y) / step).ceil() as usize;
    let inside = |r: &BBox, x: f64, y: f64| x > r.x_min && x < r.x_max && y > r.y_min && y < r.y_max;
    let (mut inter, mut union) = (0u64, 0u64);
    for j in 0..ny {
        let y = lo_y + (j as f64 + 0.5) * step;
        for i in 0..nx {
            let x = lo_x + (i as f64 + 0.5) * step;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `n` distinct scores in (0, 1).
pub fn distinct_scores(rng: &mut CounterRng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    rng.shuffle(&mut v);
    v
}

pub fn random_box(rng: &mut CounterRng, extent: f64, quantum: f64) -> BBox {
    let q = |v: f64| (v / quantum).round() * quantum;
    let x0 = q(rng.uniform_range(0.0, extent * 0.8));
    let y0 = q(rng.uniform_range(0.0, extent * 0.8));
    let w = q(rng.uniform_range(quantum, extent * 0.4)).max(quantum);
    let h = q(rng.uniform_range(quantum, extent * 0.4)).max(quantum);
    BBox::new(x0, y0, x0 + w, y0 + h)
}

/// A random detection instance: a few images, two classes, ground truth
/// plus jittered and spurious predictions with distinct scores.
pub fn random_detection_instance(seed: u64) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let mut r = CounterRng::new(seed);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for img in 0..3 {
        let id = format!("img{img}");
        for _ in 0..r.int_inclusive(0, 4) {
            let class = r.below(2) as usize;
            let b = random_box(&mut r, 50.0, 0.5);
            gts.push(GroundTruthBox { image_id: id.clone(), class, bbox: b });
            for _ in 0..r.int_inclusive(0, 2) {
                let j = |r: &mut CounterRng| r.uniform_range(-3.0, 3.0);
                let bb = BBox::new(b.x_min + j(&mut r), b.y_min + j(&mut r), b.x_max + j(&mut r), b.y_max + j(&mut r));
                if bb.is_valid() {
                    preds.push((id.clone(), class, bb));
                }
            }
        }
        for _ in 0..r.int_inclusive(0, 3) {
            preds.push((id.clone(), r.below(2) as usize, random_box(&mut r, 50.0, 0.5)));
        }
    }
    let scores = distinct_scores(&mut r, preds.len());
    let preds = preds
        .into_iter()
        .zip(scores)
        .map(|((image_id, class, bbox), score)| Detection { image_id, class, score, bbox })
        .collect();
    (preds, gts)
}

//! Deterministic synthetic "blob-world" scenes.
//!
//! Each scene is a textured background with non-overlapping rotated
//! ellipses. Sample `i` of a dataset draws all of its randomness from
//! `CounterRng::for_index(seed, i)` (SplitMix64 over a counter), so results
//! do not depend on thread count or generation order.
//!
//! Annotation logic is integer-only: blob orientations come from a fixed
//! table of Pythagorean-triple rotations and pixel membership is decided by
//! an exact `i64` inequality, so masks, boxes and counts are bit-identical
//! on every platform.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::io::{
    format_counts, format_ground_truth_boxes, num, parse_err, parse_ground_truth_boxes, read_label_map, records, write_label_map,
};
use crate::metrics::{BBox, GroundTruthBox};
use crate::par::Exec;
use crate::rng::{splitmix64, CounterRng};

/// Rotations `(cos, sin, hypotenuse)` with integer entries.
pub const ROTATIONS: [(i64, i64, i64); 8] = [
    (1, 0, 1),
    (12, 5, 13),
    (4, 3, 5),
    (3, 4, 5),
    (5, 12, 13),
    (0, 1, 1),
    (-5, 12, 13),
    (-3, 4, 5),
];

const BLOB_PALETTE: [[f64; 3]; 4] = [
    [0.86, 0.76, 0.30],
    [0.25, 0.70, 0.28],
    [0.85, 0.35, 0.20],
    [0.55, 0.45, 0.85],
];

const SOIL: [f64; 3] = [0.36, 0.27, 0.20];

const TINTS: [[f64; 3]; 4] = [
    [0.25, 0.0, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.0, 0.25],
    [0.2, 0.2, 0.2],
];

const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobWorldConfig {
    pub width: usize,
    pub height: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    /// Number of foreground (mask / box) classes.
    pub blob_classes: usize,
    /// Number of scene classes; counts are split into this many buckets.
    pub scene_classes: usize,
    /// Shift the background colour per scene class so that classes are
    /// linearly separable from mean colour alone.
    pub class_tint: bool,
    pub noise: f64,
    /// Fraction of samples (in thousandths) assigned to the test split.
    pub test_permille: u64,
}

impl Default for BlobWorldConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_blobs: 1,
            max_blobs: 6,
            radius_min: 3,
            radius_max: 6,
            blob_classes: 1,
            scene_classes: 3,
            class_tint: false,
            noise: 0.04,
            test_permille: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blob {
    /// Center pixel (column, row).
    pub cx: i64,
    pub cy: i64,
    pub rx: i64,
    pub ry: i64,
    /// Index into [`ROTATIONS`].
    pub orientation: usize,
    pub class: usize,
}

impl Blob {
    pub fn bound(&self) -> i64 {
        self.rx.max(self.ry)
    }

    /// Offset `(dx, dy)` from the center lies inside the ellipse.
    #[inline]
    pub fn contains_offset(&self, dx: i64, dy: i64) -> bool {
        let (a, b, c) = ROTATIONS[self.orientation];
        let u = a * dx + b * dy;
        let v = -b * dx + a * dy;
        let (rx2, ry2) = (self.rx * self.rx, self.ry * self.ry);
        u * u * ry2 + v * v * rx2 <= c * c * rx2 * ry2
    }

    /// Pixels covered, as `(x, y)`.
    pub fn pixels(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        let r = self.bound();
        (-r..=r).flat_map(move |dy| {
            (-r..=r)
                .filter(move |&dx| self.contains_offset(dx, dy))
                .map(move |dx| (self.cx + dx, self.cy + dy))
        })
    }

    /// Tight pixel-edge bounds.
    pub fn bbox(&self) -> BBox {
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for (x, y) in self.pixels() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
    }

    /// Center in continuous pixel coordinates.
    pub fn point(&self) -> [f64; 2] {
        [self.cx as f64 + 0.5, self.cy as f64 + 0.5]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobScene {
    pub width: usize,
    pub height: usize,
    pub texture_seed: u64,
    pub blobs: Vec<Blob>,
    pub scene_class: usize,
}

/// One image with annotations for every task.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub split: Split,
    pub image: Image,
    pub scene_class: usize,
    /// Row-major labels, 0 = background, `c + 1` = blob class `c`.
    pub mask: Vec<usize>,
    pub boxes: Vec<(BBox, usize)>,
    pub points: Vec<[f64; 2]>,
}

impl LabeledSample {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn ground_truth_boxes(&self) -> Vec<GroundTruthBox> {
        self.boxes
            .iter()
            .map(|&(bbox, class)| GroundTruthBox {
                image_id: self.id.clone(),
                class,
                bbox,
            })
            .collect()
    }
}

impl BlobWorldConfig {
    fn area_demand(&self) -> f64 {
        let r = (self.radius_max + 1) as f64;
        self.max_blobs as f64 * std::f64::consts::PI * r * r
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.min_blobs > self.max_blobs {
            return bad(format!("min_blobs {} > max_blobs {}", self.min_blobs, self.max_blobs));
        }
        if self.radius_min == 0 || self.radius_min > self.radius_max {
            return bad(format!("radius range [{}, {}] is invalid", self.radius_min, self.radius_max));
        }
        if self.blob_classes == 0 || self.blob_classes > BLOB_PALETTE.len() {
            return bad(format!("blob_classes must be in 1..={}", BLOB_PALETTE.len()));
        }
        if self.scene_classes == 0 || self.scene_classes > self.max_blobs - self.min_blobs + 1 {
            return bad(format!(
                "{} scene classes need at least as many distinct counts in [{}, {}]",
                self.scene_classes, self.min_blobs, self.max_blobs
            ));
        }
        if self.class_tint && self.scene_classes > TINTS.len() {
            return bad(format!("class_tint supports at most {} scene classes", TINTS.len()));
        }
        if self.test_permille > 1000 {
            return bad("test_permille must be <= 1000".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must be in [0, 1]".into());
        }
        let side = 2 * self.radius_max + 1;
        // Random sequential placement saturates near 55% coverage; stay well below.
        if side > self.width || side > self.height || self.area_demand() > 0.3 * (self.width * self.height) as f64 {
            return bad(format!(
                "up to {} blobs of radius {} do not fit on a {}x{} canvas",
                self.max_blobs, self.radius_max, self.width, self.height
            ));
        }
        Ok(())
    }

    /// Inclusive count range of scene class `k`.
    pub fn bucket(&self, k: usize) -> (usize, usize) {
        let span = self.max_blobs - self.min_blobs + 1;
        let lo = self.min_blobs + k * span / self.scene_classes;
        let hi = self.min_blobs + (k + 1) * span / self.scene_classes - 1;
        (lo, hi)
    }

    pub fn split_of(&self, seed: u64, index: u64) -> Split {
        let h = splitmix64(splitmix64(seed ^ 0x5EED_5B17) ^ index);
        if h % 1000 < self.test_permille {
            Split::Test
        } else {
            Split::Train
        }
    }

    /// Expected fraction of canvas pixels labelled with blob class `c`,
    /// computed exactly from the lattice areas of every radius/orientation
    /// combination.
    pub fn expected_class_fraction(&self, c: usize) -> f64 {
        if c >= self.blob_classes {
            return 0.0;
        }
        let mut area = 0.0;
        let mut combos = 0.0;
        for rx in self.radius_min..=self.radius_max {
            for ry in self.radius_min..=self.radius_max {
                for o in 0..ROTATIONS.len() {
                    let b = Blob {
                        cx: 0,
                        cy: 0,
                        rx: rx as i64,
                        ry: ry as i64,
                        orientation: o,
                        class: 0,
                    };
                    area += b.pixels().count() as f64;
                    combos += 1.0;
                }
            }
        }
        let mut count = 0.0;
        for k in 0..self.scene_classes {
            let (lo, hi) = self.bucket(k);
            count += (lo + hi) as f64 / 2.0 / self.scene_classes as f64;
        }
        count * (area / combos) / self.blob_classes as f64 / (self.width * self.height) as f64
    }

    pub fn scene(&self, seed: u64, index: u64) -> Result<BlobScene> {
        let mut rng = CounterRng::for_index(seed, index);
        let scene_class = rng.below(self.scene_classes as u64) as usize;
        let (lo, hi) = self.bucket(scene_class);
        let count = rng.int_inclusive(lo as i64, hi as i64) as usize;
        let texture_seed = rng.next_u64();
        let mut blobs: Vec<Blob> = Vec::with_capacity(count);
        let mut attempts = 0;
        for _ in 0..count {
            // Shape is drawn once per blob so that rejection does not bias size.
            let rx = rng.int_inclusive(self.radius_min as i64, self.radius_max as i64);
            let ry = rng.int_inclusive(self.radius_min as i64, self.radius_max as i64);
            let orientation = rng.below(ROTATIONS.len() as u64) as usize;
            let class = rng.below(self.blob_classes as u64) as usize;
            let r = rx.max(ry);
            loop {
                attempts += 1;
                if attempts > PLACEMENT_ATTEMPTS * count {
                    return Err(Error::Config(format!(
                        "could not place {count} non-overlapping blobs on a {}x{} canvas",
                        self.width, self.height
                    )));
                }
                let cx = rng.int_inclusive(r, self.width as i64 - 1 - r);
                let cy = rng.int_inclusive(r, self.height as i64 - 1 - r);
                let clear = blobs.iter().all(|o| {
                    let (dx, dy) = (o.cx - cx, o.cy - cy);
                    let gap = o.bound() + r + 2;
                    dx * dx + dy * dy >= gap * gap
                });
                if clear {
                    blobs.push(Blob {
                        cx,
                        cy,
                        rx,
                        ry,
                        orientation,
                        class,
                    });
                    break;
                }
            }
        }
        Ok(BlobScene {
            width: self.width,
            height: self.height,
            texture_seed,
            blobs,
            scene_class,
        })
    }

    pub fn render(&self, scene: &BlobScene, id: String, split: Split) -> LabeledSample {
        let (w, h) = (scene.width, scene.height);
        let mut mask = vec![0usize; w * h];
        for b in &scene.blobs {
            for (x, y) in b.pixels() {
                mask[y as usize * w + x as usize] = b.class + 1;
            }
        }
        let mut trng = CounterRng::new(scene.texture_seed);
        let phase = [trng.uniform() * std::f64::consts::TAU, trng.uniform() * std::f64::consts::TAU];
        let freq = [trng.uniform_range(0.05, 0.2), trng.uniform_range(0.05, 0.2)];
        let tint = if self.class_tint { TINTS[scene.scene_class] } else { [0.0; 3] };
        let colors: Vec<[f64; 3]> = scene
            .blobs
            .iter()
            .map(|b| {
                let base = BLOB_PALETTE[b.class];
                let j = trng.uniform_range(-0.05, 0.05);
                [base[0] + j, base[1] + j, base[2] + j]
            })
            .collect();
        let mut owner = vec![usize::MAX; w * h];
        for (i, b) in scene.blobs.iter().enumerate() {
            for (x, y) in b.pixels() {
                owner[y as usize * w + x as usize] = i;
            }
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let o = owner[y * w + x];
                let wave = 0.04 * ((x as f64 * freq[0] + phase[0]).sin() + (y as f64 * freq[1] + phase[1]).sin());
                for c in 0..3 {
                    let base = if o == usize::MAX { SOIL[c] + tint[c] + wave } else { colors[o][c] };
                    let n = self.noise * (2.0 * trng.uniform() - 1.0);
                    data.push((base + n).clamp(0.0, 1.0));
                }
            }
        }
        let boxes = scene.blobs.iter().map(|b| (b.bbox(), b.class)).collect();
        let points = scene.blobs.iter().map(Blob::point).collect();
        LabeledSample {
            id,
            split,
            image: Image::new(h, w, data).expect("rendered pixels are finite"),
            scene_class: scene.scene_class,
            mask,
            boxes,
            points,
        }
    }

    pub fn sample(&self, seed: u64, index: u64) -> Result<LabeledSample> {
        let scene = self.scene(seed, index)?;
        Ok(self.render(&scene, format!("s{index:06}"), self.split_of(seed, index)))
    }
}

pub fn gen_blobworld(config: &BlobWorldConfig, seed: u64, n: usize, exec: Exec) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    config.validate()?;
    exec.try_map_range(n, |i| config.sample(seed, i as u64))
}

/// Write one directory per split:
///
/// ```text
/// <split>/images/<id>.png   RGB
/// <split>/masks/<id>.png    8-bit label map
/// <split>/labels.txt        sample_id scene_class
/// <split>/boxes.txt         detection ground truth
/// <split>/counts.txt        image_id count
/// <split>/points.txt        image_id x y
/// ```
pub fn export_dataset(samples: &[LabeledSample], out: &Path) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        let part: Vec<&LabeledSample> = samples.iter().filter(|s| s.split == split).collect();
        let dir = out.join(split.as_str());
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut labels = String::from("# sample_id scene_class\n");
        let mut points = String::from("# image_id x y\n");
        let mut gts = Vec::new();
        for s in &part {
            s.image.save_png(&dir.join("images").join(format!("{}.png", s.id)))?;
            write_label_map(
                &dir.join("masks").join(format!("{}.png", s.id)),
                s.image.width(),
                s.image.height(),
                &s.mask,
            )?;
            let _ = writeln!(labels, "{} {}", s.id, s.scene_class);
            for p in &s.points {
                let _ = writeln!(points, "{} {} {}", s.id, p[0], p[1]);
            }
            gts.extend(s.ground_truth_boxes());
        }
        let counts = format_counts(part.iter().map(|s| (s.id.as_str(), s.count() as f64)));
        for (name, text) in [
            ("labels.txt", labels),
            ("points.txt", points),
            ("boxes.txt", format_ground_truth_boxes(&gts)),
            ("counts.txt", counts),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Read back a directory written by [`export_dataset`]: train split first,
/// then test, each in `labels.txt` order. Pixel values pass through 8-bit
/// PNG, so images match the originals to within 1/255.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Test] {
        let sd = dir.join(split.as_str());
        let read = |name: &str| {
            let p = sd.join(name);
            fs::read_to_string(&p).map(|t| (p.clone(), t)).map_err(|e| Error::io(&p, e))
        };
        let (lp, labels) = read("labels.txt")?;
        let (pp, points_text) = read("points.txt")?;
        let (bp, boxes_text) = read("boxes.txt")?;
        let mut points: BTreeMap<String, Vec<[f64; 2]>> = BTreeMap::new();
        for (line, f) in records(&points_text) {
            if f.len() != 3 {
                return Err(parse_err(&pp, line, "expected `image_id x y`"));
            }
            points
                .entry(f[0].to_string())
                .or_default()
                .push([num(&pp, line, f[1], "x")?, num(&pp, line, f[2], "y")?]);
        }
        let mut boxes: BTreeMap<String, Vec<(BBox, usize)>> = BTreeMap::new();
        for g in parse_ground_truth_boxes(&bp, &boxes_text)? {
            boxes.entry(g.image_id).or_default().push((g.bbox, g.class));
        }
        for (line, f) in records(&labels) {
            if f.len() != 2 {
                return Err(parse_err(&lp, line, "expected `sample_id scene_class`"));
            }
            let id = f[0].to_string();
            let image = Image::load(&sd.join("images").join(format!("{id}.png")))?;
            let (w, h, mask) = read_label_map(&sd.join("masks").join(format!("{id}.png")))?;
            if (h, w) != (image.height(), image.width()) {
                return Err(Error::Validation(format!("{id}: mask is {w}x{h}, image {}x{}", image.width(), image.height())));
            }
            out.push(LabeledSample {
                split,
                scene_class: num(&lp, line, f[1], "scene class")?,
                image,
                mask,
                boxes: boxes.remove(&id).unwrap_or_default(),
                points: points.remove(&id).unwrap_or_default(),
                id,
            });
        }
        if let Some(id) = points.keys().chain(boxes.keys()).next() {
            return Err(Error::Validation(format!("{}: annotations for unknown sample `{id}`", sd.display())));
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{} holds no samples", dir.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BlobWorldConfig {
        BlobWorldConfig::default()
    }

    #[test]
    fn rotations_are_pythagorean() {
        for (a, b, c) in ROTATIONS {
            assert_eq!(a * a + b * b, c * c);
        }
    }

    #[test]
    fn circle_is_rotation_invariant() {
        let areas: Vec<usize> = (0..ROTATIONS.len())
            .map(|o| {
                Blob {
                    cx: 0,
                    cy: 0,
                    rx: 4,
                    ry: 4,
                    orientation: o,
                    class: 0,
                }
                .pixels()
                .count()
            })
            .collect();
        assert!(areas.iter().all(|&a| a == areas[0]));
        // lattice points with x^2 + y^2 <= 16
        assert_eq!(areas[0], 49);
    }

    #[test]
    fn deterministic_and_consistent() {
        let a = gen_blobworld(&cfg(), 7, 20, Exec::Parallel).unwrap();
        let b = gen_blobworld(&cfg(), 7, 20, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.points.len(), s.boxes.len());
            let (lo, hi) = cfg().bucket(s.scene_class);
            assert!((lo..=hi).contains(&s.count()));
            let nonzero = s.mask.iter().filter(|&&m| m != 0).count();
            let scene = cfg().scene(7, s.id[1..].parse().unwrap()).unwrap();
            let raster: usize = scene.blobs.iter().map(|b| b.pixels().count()).sum();
            assert_eq!(nonzero, raster);
        }
    }

    #[test]
    fn boxes_are_tight() {
        let s = cfg().sample(3, 0).unwrap();
        let w = s.image.width();
        for &(b, _) in &s.boxes {
            let (x0, y0, x1, y1) = (b.x_min as usize, b.y_min as usize, b.x_max as usize, b.y_max as usize);
            let any_row = |y: usize| (x0..x1).any(|x| s.mask[y * w + x] != 0);
            let any_col = |x: usize| (y0..y1).any(|y| s.mask[y * w + x] != 0);
            assert!(any_row(y0) && any_row(y1 - 1) && any_col(x0) && any_col(x1 - 1));
        }
    }

    #[test]
    fn capacity_is_checked() {
        let c = BlobWorldConfig {
            max_blobs: 200,
            ..cfg()
        };
        assert!(matches!(gen_blobworld(&c, 0, 1, Exec::Sequential), Err(Error::Config(_))));
        let c = BlobWorldConfig {
            radius_max: 40,
            ..cfg()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn buckets_partition_counts() {
        let c = BlobWorldConfig {
            min_blobs: 1,
            max_blobs: 9,
            ..cfg()
        };
        assert_eq!(c.bucket(0), (1, 3));
        assert_eq!(c.bucket(1), (4, 6));
        assert_eq!(c.bucket(2), (7, 9));
    }

    #[test]
    fn export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_blobworld(&cfg(), 1, 6, Exec::Sequential).unwrap();
        export_dataset(&samples, dir.path()).unwrap();
        for s in &samples {
            let img = dir.path().join(s.split.as_str()).join("images").join(format!("{}.png", s.id));
            assert!(img.exists());
        }
        let counts = fs::read_to_string(dir.path().join("train/counts.txt")).unwrap();
        assert!(counts.lines().count() >= 1);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), samples.len());
        for b in &back {
            let s = samples.iter().find(|s| s.id == b.id).unwrap();
            assert_eq!((&b.mask, &b.boxes, &b.points, b.scene_class, b.split), (&s.mask, &s.boxes, &s.points, s.scene_class, s.split));
            assert!(b.image.data().iter().zip(s.image.data()).all(|(a, c)| (a - c).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }
}

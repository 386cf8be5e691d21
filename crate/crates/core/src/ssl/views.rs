//! Multi-view augmentation and patch masking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::CounterRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub num_local: usize,
    /// Crop area range as fractions of the source image.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub jitter_strength: f64,
    pub gray_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    /// Fraction of patches hidden from the student in each global view.
    pub mask_ratio: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            global_size: 32,
            local_size: 16,
            num_local: 4,
            global_scale: (0.4, 1.0),
            local_scale: (0.1, 0.4),
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter_strength: 0.4,
            gray_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 1.0),
            mask_ratio: 0.4,
        }
    }
}

impl AugConfig {
    /// Both global views are the (resized) source image, no local views,
    /// no photometric changes and no masking.
    pub fn identity(size: usize) -> Self {
        Self {
            global_size: size,
            local_size: size,
            num_local: 0,
            global_scale: (1.0, 1.0),
            local_scale: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            jitter_strength: 0.0,
            gray_p: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.0, 0.0),
            mask_ratio: 0.0,
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, s) in [("global_size", self.global_size), ("local_size", self.local_size)] {
            if s == 0 || s % patch_size != 0 {
                return bad(format!("{name} {s} not a positive multiple of patch size {patch_size}"));
            }
        }
        for (name, (lo, hi)) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
            }
        }
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("gray_p", self.gray_p),
            ("blur_p", self.blur_p),
            ("mask_ratio", self.mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Patches hidden for a ratio `r` over `n` positions: `floor(r n)`.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).floor() as usize).min(n)
}

pub fn random_mask(n: usize, ratio: f64, rng: &mut CounterRng) -> Vec<bool> {
    let mut m = vec![false; n];
    for i in rng.choose_indices(n, mask_count(ratio, n)) {
        m[i] = true;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    /// Student mask per global view.
    pub masks: Vec<Vec<bool>>,
    pub seed: u64,
}

impl ViewBatch {
    pub fn num_student_views(&self) -> usize {
        self.globals.len() + self.locals.len()
    }
}

fn resized_crop(img: &Image, scale: (f64, f64), size: usize, rng: &mut CounterRng) -> Image {
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.uniform_range(scale.0, scale.1);
        let log_r = rng.uniform_range((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
        let r = log_r.exp();
        let cw = (target * r).sqrt().round() as usize;
        let ch = (target / r).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.below((h - ch + 1) as u64) as usize;
            let left = rng.below((w - cw + 1) as u64) as usize;
            return img.crop(top, left, ch, cw).expect("in bounds").resize(size, size);
        }
    }
    // Fallback: centred square crop of the largest feasible side.
    let side = h.min(w);
    img.crop((h - side) / 2, (w - side) / 2, side, side)
        .expect("in bounds")
        .resize(size, size)
}

fn photometric(img: Image, cfg: &AugConfig, rng: &mut CounterRng) -> Image {
    let mut img = img;
    if rng.bernoulli(cfg.flip_p) {
        img = img.hflip();
    }
    if rng.bernoulli(cfg.jitter_p) {
        let s = cfg.jitter_strength;
        let b = rng.uniform_range(1.0 - s, 1.0 + s);
        let c = rng.uniform_range(1.0 - s, 1.0 + s);
        let sat = rng.uniform_range(1.0 - s, 1.0 + s);
        img = img.jitter(b, c, sat);
    }
    if rng.bernoulli(cfg.gray_p) {
        img = img.grayscale();
    }
    if rng.bernoulli(cfg.blur_p) {
        img = img.blur(rng.uniform_range(cfg.blur_sigma.0, cfg.blur_sigma.1));
    }
    img
}

/// Two global views (each with a student mask) and `num_local` local views.
pub fn make_views(image: &Image, cfg: &AugConfig, patch_size: usize, seed: u64) -> Result<ViewBatch> {
    cfg.validate(patch_size)?;
    if image.height() < cfg.global_size || image.width() < cfg.global_size {
        return Err(Error::Input(format!(
            "image {}x{} smaller than the {} pixel global crop",
            image.height(),
            image.width(),
            cfg.global_size
        )));
    }
    let root = CounterRng::new(seed);
    let n = (cfg.global_size / patch_size).pow(2);
    let mut globals = Vec::with_capacity(2);
    let mut masks = Vec::with_capacity(2);
    for v in 0..2u64 {
        let mut rng = root.fork(v);
        let crop = resized_crop(image, cfg.global_scale, cfg.global_size, &mut rng);
        globals.push(photometric(crop, cfg, &mut rng));
        masks.push(random_mask(n, cfg.mask_ratio, &mut root.fork(100 + v)));
    }
    let locals = (0..cfg.num_local as u64)
        .map(|v| {
            let mut rng = root.fork(2 + v);
            let crop = resized_crop(image, cfg.local_scale, cfg.local_size, &mut rng);
            photometric(crop, cfg, &mut rng)
        })
        .collect();
    Ok(ViewBatch {
        globals,
        locals,
        masks,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Image {
        Image::from_fn(40, 48, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0)
    }

    #[test]
    fn deterministic_and_shaped() {
        let cfg = AugConfig::default();
        let a = make_views(&img(), &cfg, 8, 5).unwrap();
        assert_eq!(a, make_views(&img(), &cfg, 8, 5).unwrap());
        assert_ne!(a, make_views(&img(), &cfg, 8, 6).unwrap());
        assert_eq!(a.globals.len(), 2);
        assert_eq!(a.locals.len(), 4);
        assert!(a.globals.iter().all(|g| g.height() == 32 && g.width() == 32));
        assert!(a.locals.iter().all(|g| g.height() == 16));
        assert!(a.masks.iter().all(|m| m.len() == 16 && m.iter().filter(|&&b| b).count() == 6));
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(0.4, 16), 6);
        assert_eq!(mask_count(0.0, 16), 0);
        assert_eq!(mask_count(1.0, 16), 16);
    }

    #[test]
    fn identity_views() {
        let src = Image::from_fn(32, 32, |y, x, c| ((y + x + c) % 5) as f64 / 4.0);
        let v = make_views(&src, &AugConfig::identity(32), 8, 1).unwrap();
        assert_eq!(v.globals[0], src);
        assert_eq!(v.globals[1], src);
        assert!(v.masks.iter().all(|m| m.iter().all(|&b| !b)));
    }

    #[test]
    fn undersized_input_rejected() {
        let small = Image::zeros(20, 40);
        assert!(matches!(make_views(&small, &AugConfig::default(), 8, 0), Err(Error::Input(_))));
    }
}

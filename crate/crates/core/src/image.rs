//! RGB images in `[0, 1]`, stored height x width x 3 row-major, and the
//! augmentation primitives used by view generation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixel".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Input(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(height, width, |y, x, c| self.get(top + y, left + x, c)))
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let tap = |o: usize, scale: f64, n: usize| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        let rows: Vec<_> = (0..height).map(|y| tap(y, sy, self.height)).collect();
        let cols: Vec<_> = (0..width).map(|x| tap(x, sx, self.width)).collect();
        Image::from_fn(height, width, |y, x, c| {
            let (y0, y1, fy) = rows[y];
            let (x0, x1, fx) = cols[x];
            let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
            let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    pub fn hflip(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    fn luma(p: [f64; 3]) -> f64 {
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    }

    pub fn grayscale(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, _| Self::luma(self.pixel(y, x)))
    }

    /// Brightness, contrast and saturation scaling, clamped to `[0, 1]`.
    pub fn jitter(&self, brightness: f64, contrast: f64, saturation: f64) -> Image {
        let n = (self.height * self.width) as f64;
        let mean_luma = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (y, x)))
            .map(|(y, x)| Self::luma(self.pixel(y, x)))
            .sum::<f64>()
            / n.max(1.0);
        Image::from_fn(self.height, self.width, |y, x, c| {
            let p = self.pixel(y, x);
            let v = p[c] * brightness;
            let v = (v - mean_luma) * contrast + mean_luma;
            let l = Self::luma(p) * brightness;
            ((v - l) * saturation + l).clamp(0.0, 1.0)
        })
    }

    /// Separable Gaussian blur with radius `ceil(3 sigma)`, edge clamped.
    pub fn blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let ks: f64 = k.iter().sum();
        let k: Vec<f64> = k.iter().map(|v| v / ks).collect();
        let (h, w) = (self.height as isize, self.width as isize);
        let horiz = Image::from_fn(self.height, self.width, |y, x, c| {
            (-r..=r)
                .map(|d| {
                    let xx = (x as isize + d).clamp(0, w - 1) as usize;
                    k[(d + r) as usize] * self.get(y, xx, c)
                })
                .sum()
        });
        Image::from_fn(self.height, self.width, |y, x, c| {
            (-r..=r)
                .map(|d| {
                    let yy = (y as isize + d).clamp(0, h - 1) as usize;
                    k[(d + r) as usize] * horiz.get(yy, x, c)
                })
                .sum()
        })
    }

    /// Non-overlapping `p x p` patches flattened as `(dy, dx, channel)`;
    /// rows ordered row-major over the patch grid.
    pub fn patches(&self, p: usize) -> Result<(usize, usize, Vec<f64>)> {
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {p}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / p, self.width / p);
        let mut out = Vec::with_capacity(self.data.len());
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..p {
                    let row = ((gy * p + dy) * self.width + gx * p) * 3;
                    out.extend_from_slice(&self.data[row..row + p * 3]);
                }
            }
        }
        Ok((gh, gw, out))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size matches")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = img.dimensions();
        Image {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        Ok(Image::from_rgb8(&image::open(path)?.to_rgb8()))
    }
}

/// Hybrid-scale square cropping: side uniform over the integers in
/// `[min_side, min(max_side, height, width)]`, offset uniform over all
/// valid positions.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HybridCrop {
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for HybridCrop {
    fn default() -> Self {
        Self {
            min_side: 64,
            max_side: 128,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CropBatch {
    pub crops: Vec<Image>,
    /// Indices of inputs smaller than `min_side` on either axis.
    pub skipped: Vec<usize>,
}

impl HybridCrop {
    /// Full-resolution preset (512 to 1024 pixels).
    pub const FULL: HybridCrop = HybridCrop {
        min_side: 512,
        max_side: 1024,
    };

    pub fn validate(&self) -> Result<()> {
        if self.min_side == 0 || self.min_side > self.max_side {
            return Err(Error::Config(format!(
                "crop range [{}, {}] is empty",
                self.min_side, self.max_side
            )));
        }
        Ok(())
    }

    /// Crop geometry `(top, left, side)`, or `None` if the image is too small.
    pub fn sample(&self, height: usize, width: usize, rng: &mut CounterRng) -> Option<(usize, usize, usize)> {
        if height < self.min_side || width < self.min_side {
            return None;
        }
        let hi = self.max_side.min(height).min(width);
        let side = rng.int_inclusive(self.min_side as i64, hi as i64) as usize;
        let top = rng.below((height - side + 1) as u64) as usize;
        let left = rng.below((width - side + 1) as u64) as usize;
        Some((top, left, side))
    }

    pub fn apply(&self, image: &Image, rng: &mut CounterRng) -> Option<Image> {
        let (top, left, side) = self.sample(image.height(), image.width(), rng)?;
        Some(image.crop(top, left, side, side).expect("sampled crop is in bounds"))
    }

    /// Crop every image; image `i` draws from stream `(seed, i)`.
    pub fn apply_all(&self, images: &[Image], seed: u64) -> CropBatch {
        let mut out = CropBatch::default();
        for (i, img) in images.iter().enumerate() {
            let mut rng = CounterRng::for_index(seed, i as u64);
            match self.apply(img, &mut rng) {
                Some(c) => out.crops.push(c),
                None => out.skipped.push(i),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| ((y * w + x) * 3 + c) as f64 / (h * w * 3) as f64)
    }

    #[test]
    fn patches_layout() {
        let img = ramp(4, 4);
        let (gh, gw, p) = img.patches(2).unwrap();
        assert_eq!((gh, gw), (2, 2));
        assert_eq!(p.len(), 4 * 12);
        // second patch starts at pixel (0, 2)
        assert_eq!(p[12], img.get(0, 2, 0));
        assert_eq!(p[12 + 6], img.get(1, 2, 0));
        assert!(img.patches(3).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(6, 5);
        assert_eq!(img.resize(6, 5), img);
        let c = Image::from_fn(5, 7, |_, _, _| 0.25);
        assert!(c.resize(11, 3).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp(3, 5);
        assert_eq!(img.hflip().hflip(), img);
        assert_eq!(img.hflip().get(0, 0, 1), img.get(0, 4, 1));
    }

    #[test]
    fn jitter_identity_and_blur_preserves_constant() {
        let img = ramp(4, 4);
        let j = img.jitter(1.0, 1.0, 1.0);
        for (a, b) in j.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Image::from_fn(6, 6, |_, _, _| 0.4);
        assert!(c.blur(1.0).data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn hybrid_crop_exact_min_size() {
        let crop = HybridCrop { min_side: 8, max_side: 16 };
        let img = ramp(8, 8);
        let mut rng = CounterRng::new(0);
        assert_eq!(crop.apply(&img, &mut rng).unwrap(), img);
        assert!(crop.apply(&ramp(7, 20), &mut rng).is_none());
        let batch = crop.apply_all(&[ramp(8, 8), ramp(4, 4), ramp(20, 30)], 3);
        assert_eq!(batch.skipped, vec![1]);
        assert_eq!(batch.crops.len(), 2);
    }
}

//! Principal components of patch embeddings, rendered as an RGB image.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::backbone::{Backbone, Features};
use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::par::Exec;
use crate::tensor::Tensor;

/// Full eigenbasis of the sample covariance of `N x d` rows.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit directions, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the `1 / (N - 1)` covariance, non-increasing.
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(rows: &Tensor) -> Result<Self> {
        let (n, d) = rows.rows_cols();
        if n < 3 {
            return Err(Error::Input(format!("PCA needs at least 3 patches, got {n}")));
        }
        if d < 3 {
            return Err(dim_err!("PCA export needs embeddings of width >= 3, got {d}"));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(rows.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centred = DMatrix::from_fn(n, d, |i, j| rows.row(i)[j] - mean[j]);
        let cov = (centred.transpose() * &centred) / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let components = order
            .iter()
            .map(|&k| {
                let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                // sign convention: largest-magnitude entry positive
                let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                if big < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        let variances = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates of `row` on the first `k` components.
    pub fn project(&self, row: &[f64], k: usize) -> Vec<f64> {
        self.components[..k]
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, a) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += a * v;
            }
        }
        out
    }

    /// Top three components of `f`'s patches, each min-max scaled to
    /// [0, 1] over this image, upsampled bilinearly to `height x width`.
    pub fn render(&self, f: &Features, height: usize, width: usize) -> Result<Image> {
        let (n, d) = f.patches.rows_cols();
        if d != self.dim() {
            return Err(dim_err!("PCA basis of width {} for {d}-wide features", self.dim()));
        }
        let proj: Vec<Vec<f64>> = (0..n).map(|i| self.project(f.patches.row(i), 3)).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &proj {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let (gh, gw) = f.grid;
        let small = Image::from_fn(gh, gw, |y, x, c| {
            let span = hi[c] - lo[c];
            if span > 0.0 {
                (proj[y * gw + x][c] - lo[c]) / span
            } else {
                0.0
            }
        });
        Ok(small.resize(height, width))
    }
}

/// Per-image PCA of the patch embeddings, as an image-sized RGB map.
pub fn pca_features(backbone: &Backbone, image: &Image) -> Result<Image> {
    let f = backbone.encode(image)?;
    Pca::fit(&f.patches)?.render(&f, image.height(), image.width())
}

/// One basis fitted over the patches of every image.
pub fn pca_corpus(backbone: &Backbone, images: &[Image], exec: Exec) -> Result<(Pca, Vec<Image>)> {
    let feats = backbone.encode_batch(images, exec)?;
    let d = backbone.config.embed_dim;
    let rows: Vec<f64> = feats.iter().flat_map(|f| f.patches.data().iter().copied()).collect();
    let n = rows.len() / d;
    let pca = Pca::fit(&Tensor::new([n, d], rows)?)?;
    let out = feats
        .iter()
        .zip(images)
        .map(|(f, img)| pca.render(f, img.height(), img.width()))
        .collect::<Result<Vec<_>>>()?;
    Ok((pca, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ModelConfig, Preset};
    use crate::rng::CounterRng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = CounterRng::new(seed);
        // anisotropic so the spectrum is well separated
        let data = (0..n * d).map(|k| r.normal() * (1.0 + (k % d) as f64)).collect();
        Tensor::new([n, d], data).unwrap()
    }

    #[test]
    fn orthonormal_sorted_and_invertible() {
        let x = random_rows(40, 12, 3);
        let p = Pca::fit(&x).unwrap();
        for a in 0..12 {
            for b in 0..12 {
                let dot: f64 = p.components[a].iter().zip(&p.components[b]).map(|(u, v)| u * v).sum();
                assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-8);
            }
        }
        assert!(p.variances.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..40 {
            let back = p.reconstruct(&p.project(x.row(i), 12));
            assert!(back.iter().zip(x.row(i)).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn variance_matches_projection_spread() {
        let x = random_rows(30, 5, 9);
        let p = Pca::fit(&x).unwrap();
        let proj: Vec<f64> = (0..30).map(|i| p.project(x.row(i), 1)[0]).collect();
        let var = proj.iter().map(|v| v * v).sum::<f64>() / 29.0;
        assert!((var - p.variances[0]).abs() < 1e-9 * var.max(1.0));
    }

    #[test]
    fn too_few_patches() {
        assert!(matches!(Pca::fit(&random_rows(2, 4, 1)), Err(Error::Input(_))));
    }

    #[test]
    fn render_is_unit_range_and_image_sized() {
        let mut bb = Backbone::new(ModelConfig::preset(Preset::Tiny), 2).unwrap();
        bb.freeze();
        let img = Image::from_fn(32, 48, |y, x, c| ((x * 5 + y * 3 + c) % 11) as f64 / 11.0);
        let out = pca_features(&bb, &img).unwrap();
        assert_eq!((out.height(), out.width()), (32, 48));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (_, many) = pca_corpus(&bb, &[img.clone(), img.hflip()], Exec::Sequential).unwrap();
        assert_eq!(many.len(), 2);
        assert!(pca_features(&bb, &Image::zeros(8, 16)).is_err());
    }
}

use std::path::PathBuf;

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::load_rgb;
use crate::error::{Error, Result};
use crate::imaging::resize_bilinear;

/// Running mean and covariance of feature vectors (Welford). The covariance
/// is the maximum-likelihood estimate `M2 / n`, so duplicating every sample
/// leaves it unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    dim: usize,
    count: usize,
    mean: Vec<f64>,
    /// Row-major `dim x dim` sum of centered outer products.
    m2: Vec<f64>,
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        FeatureStats {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
        }
    }

    pub fn from_features<'a>(dim: usize, features: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut s = Self::new(dim);
        for f in features {
            s.push(f)?;
        }
        Ok(s)
    }

    /// Statistics with the given mean and covariance, as if from `count`
    /// samples.
    pub fn from_moments(mean: Vec<f64>, covariance: &[f64], count: usize) -> Result<Self> {
        let dim = mean.len();
        if covariance.len() != dim * dim {
            return Err(Error::Validation(format!(
                "covariance has {} entries for dimension {dim}",
                covariance.len()
            )));
        }
        Ok(FeatureStats {
            dim,
            count,
            mean,
            m2: covariance.iter().map(|c| c * count as f64).collect(),
        })
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Validation(format!(
                "feature of length {} for dimension {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature".into()));
        }
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let d = self.dim;
        for i in 0..d {
            let di = delta[i];
            let row = &mut self.m2[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += di * (x[j] - self.mean[j]);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Symmetrized `M2 / n`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let n = self.count.max(1) as f64;
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] = 0.5 * (self.m2[i * d + j] + self.m2[j * d + i]) / n;
            }
        }
        c
    }
}

fn sym_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let e = SymmetricEigen::try_new(m.clone(), 1e-14, 10_000);
    match e {
        Some(e) if e.eigenvalues.iter().all(|v| v.is_finite()) => Ok(e),
        _ => {
            let n = m.nrows();
            let jittered = m + DMatrix::<f64>::identity(n, n) * 1e-10;
            SymmetricEigen::try_new(jittered, 1e-14, 10_000)
                .filter(|e| e.eigenvalues.iter().all(|v| v.is_finite()))
                .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))
        }
    }
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from rounding are clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = sym_eigen(m)?;
    let roots = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The trace of the
/// root is taken as `Tr((A^(1/2) S_b A^(1/2))^(1/2))` with `A = S_a`, which
/// is symmetric and shares its eigenvalues with `S_a S_b`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Validation(format!(
            "feature dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    let d = a.dim;
    let ca = a.covariance();
    let cb = b.covariance();
    if a.mean
        .iter()
        .chain(&b.mean)
        .chain(&ca)
        .chain(&cb)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite feature statistics".into()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = DMatrix::from_row_slice(d, d, &ca);
    let sb = DMatrix::from_row_slice(d, d, &cb);
    let root_a = sqrtm_psd(&sa)?;
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let e = sym_eigen(&inner)?;
    let tr_root: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dist = mean_term + sa.trace() + sb.trace() - 2.0 * tr_root;
    if !dist.is_finite() {
        return Err(Error::Numeric("Frechet distance is not finite".into()));
    }
    if dist < -1e-6 {
        return Err(Error::Numeric(format!("Frechet distance {dist} is negative")));
    }
    Ok(dist.max(0.0))
}

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Hand-built image statistics: 4x4 grid color means, per-channel spread
/// and mean absolute gradients, all on a 32x32 resample.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyFeatureExtractor;

const TOY_SIDE: u32 = 32;
const TOY_GRID: u32 = 4;

impl FeatureExtractor for ToyFeatureExtractor {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        (TOY_GRID * TOY_GRID * 3) as usize + 3 + 6
    }

    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Validation("image has zero extent".into()));
        }
        let img = if image.dimensions() == (TOY_SIDE, TOY_SIDE) {
            image.clone()
        } else {
            resize_bilinear(image, TOY_SIDE, TOY_SIDE)
        };
        let px = |x: u32, y: u32, c: usize| img.get_pixel(x, y).0[c] as f64 / 255.0;
        let cell = TOY_SIDE / TOY_GRID;
        let mut f = Vec::with_capacity(self.dim());
        for gy in 0..TOY_GRID {
            for gx in 0..TOY_GRID {
                for c in 0..3 {
                    let mut s = 0.0;
                    for y in gy * cell..(gy + 1) * cell {
                        for x in gx * cell..(gx + 1) * cell {
                            s += px(x, y, c);
                        }
                    }
                    f.push(s / (cell * cell) as f64);
                }
            }
        }
        let n = (TOY_SIDE * TOY_SIDE) as f64;
        for c in 0..3 {
            let mean = (0..TOY_SIDE)
                .flat_map(|y| (0..TOY_SIDE).map(move |x| (x, y)))
                .map(|(x, y)| px(x, y, c))
                .sum::<f64>()
                / n;
            let var = (0..TOY_SIDE)
                .flat_map(|y| (0..TOY_SIDE).map(move |x| (x, y)))
                .map(|(x, y)| (px(x, y, c) - mean).powi(2))
                .sum::<f64>()
                / n;
            f.push(var.sqrt());
        }
        for c in 0..3 {
            let (mut gx, mut gy) = (0.0, 0.0);
            for y in 0..TOY_SIDE {
                for x in 0..TOY_SIDE {
                    if x + 1 < TOY_SIDE {
                        gx += (px(x + 1, y, c) - px(x, y, c)).abs();
                    }
                    if y + 1 < TOY_SIDE {
                        gy += (px(x, y + 1, c) - px(x, y, c)).abs();
                    }
                }
            }
            let m = (TOY_SIDE * (TOY_SIDE - 1)) as f64;
            f.push(gx / m);
            f.push(gy / m);
        }
        Ok(f)
    }
}

/// An image given in memory or by path.
#[derive(Debug, Clone)]
pub enum ImageItem {
    Path(PathBuf),
    Image(RgbImage),
}

impl From<RgbImage> for ImageItem {
    fn from(im: RgbImage) -> Self {
        ImageItem::Image(im)
    }
}

impl From<PathBuf> for ImageItem {
    fn from(p: PathBuf) -> Self {
        ImageItem::Path(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub extractor: String,
    pub fid: f64,
    pub real_count: usize,
    pub gen_count: usize,
    pub real_skipped: usize,
    pub gen_skipped: usize,
}

/// Features of every image in order. Failures are skipped and counted; more
/// than 1% skipped is an error.
pub fn accumulate_stats(
    items: &[ImageItem],
    extractor: &dyn FeatureExtractor,
    label: &str,
) -> Result<(FeatureStats, usize)> {
    let features: Vec<Option<Vec<f64>>> = items
        .par_iter()
        .map(|item| {
            let out = match item {
                ImageItem::Path(p) => load_rgb(p).and_then(|im| extractor.extract(&im)),
                ImageItem::Image(im) => extractor.extract(im),
            };
            match out {
                Ok(f) if f.len() == extractor.dim() && f.iter().all(|v| v.is_finite()) => Some(f),
                Ok(_) => {
                    log::warn!("{label}: extractor returned a malformed feature; skipped");
                    None
                }
                Err(e) => {
                    log::warn!("{label}: {e}; skipped");
                    None
                }
            }
        })
        .collect();
    let skipped = features.iter().filter(|f| f.is_none()).count();
    if skipped as f64 > 0.01 * items.len() as f64 {
        return Err(Error::Incomplete(format!(
            "{label}: {skipped} of {} images failed feature extraction",
            items.len()
        )));
    }
    let mut stats = FeatureStats::new(extractor.dim());
    for f in features.iter().flatten() {
        stats.push(f)?;
    }
    if stats.count() < 2 {
        return Err(Error::EmptyMetric(format!(
            "{label}: FID needs at least 2 images, got {}",
            stats.count()
        )));
    }
    Ok((stats, skipped))
}

pub fn fid_over_sets(
    real: &[ImageItem],
    generated: &[ImageItem],
    extractor: &dyn FeatureExtractor,
) -> Result<FidReport> {
    let (a, real_skipped) = accumulate_stats(real, extractor, "real")?;
    let (b, gen_skipped) = accumulate_stats(generated, extractor, "generated")?;
    Ok(FidReport {
        extractor: extractor.name().to_string(),
        fid: frechet_distance(&a, &b)?,
        real_count: a.count(),
        gen_count: b.count(),
        real_skipped,
        gen_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn streaming_matches_two_pass() {
        let xs: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let t = i as f64;
                vec![t.sin() * 3.0 + 1e3, (t * 0.7).cos(), t * 0.01]
            })
            .collect();
        let s = FeatureStats::from_features(3, xs.iter().map(|v| v.as_slice())).unwrap();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..3).map(|k| xs.iter().map(|v| v[k]).sum::<f64>() / n).collect();
        let cov = s.covariance();
        for i in 0..3 {
            assert!((s.mean()[i] - mean[i]).abs() <= 1e-9 * mean[i].abs().max(1.0));
            for j in 0..3 {
                let c = xs.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).sum::<f64>() / n;
                assert!((cov[i * 3 + j] - c).abs() <= 1e-6 * c.abs().max(1e-12), "{i},{j}");
            }
        }
    }

    #[test]
    fn symmetric_and_self_zero() {
        let a = FeatureStats::from_moments(vec![0.0, 1.0], &[2.0, 0.3, 0.3, 1.0], 10).unwrap();
        let b = FeatureStats::from_moments(vec![1.0, -1.0], &[1.0, -0.2, -0.2, 0.5], 10).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn rejects_mismatched_dims() {
        let a = FeatureStats::new(2);
        let b = FeatureStats::new(3);
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn duplication_invariant() {
        let imgs: Vec<ImageItem> = (0..6u8)
            .map(|k| RgbImage::from_fn(16, 16, |x, y| Rgb([k * 30, (x * 8) as u8, (y * 8 + k as u32) as u8])).into())
            .collect();
        let gen: Vec<ImageItem> = (0..6u8)
            .map(|k| RgbImage::from_fn(16, 16, |x, _| Rgb([k * 20 + 5, (x * 4) as u8, 90])).into())
            .collect();
        let d1 = fid_over_sets(&imgs, &gen, &ToyFeatureExtractor).unwrap().fid;
        let twice = |v: &[ImageItem]| v.iter().chain(v).cloned().collect::<Vec<_>>();
        let d2 = fid_over_sets(&twice(&imgs), &twice(&gen), &ToyFeatureExtractor)
            .unwrap()
            .fid;
        // Rank-deficient covariances: square roots of near-zero eigenvalues
        // amplify rounding, hence the loose tolerance.
        assert!((d1 - d2).abs() <= 1e-6 * d1.max(1.0), "{d1} vs {d2}");
    }

    #[test]
    fn too_many_failures_is_an_error() {
        let mut items: Vec<ImageItem> = (0..10u8)
            .map(|k| RgbImage::from_pixel(8, 8, Rgb([k, k, k])).into())
            .collect();
        items.push(ImageItem::Path("/nonexistent/a.png".into()));
        assert!(matches!(
            accumulate_stats(&items, &ToyFeatureExtractor, "x"),
            Err(Error::Incomplete(_))
        ));
    }
}

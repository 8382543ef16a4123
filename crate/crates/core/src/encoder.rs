//! Embedding providers for step texts and step images.
//!
//! Memory nets and metrics only see the [`EmbeddingProvider`] contract. The
//! [`ToyEncoder`] backs every test; a pretrained contrastive encoder can be
//! plugged in behind the same trait.

use std::path::Path;

use candle_core::Tensor;
use image::RgbImage;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, Params};
use crate::seed::{rng_for, stable_hash};

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn text_dim(&self) -> usize;
    fn image_dim(&self) -> usize;
    /// Same input always yields a bitwise-identical vector.
    fn is_deterministic(&self) -> bool;
    fn encode_text(&self, text: &str) -> Result<Vec<f32>>;
    fn encode_image(&self, image: &RgbImage) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingModality {
    Text,
    Image,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEmbedding {
    pub modality: EmbeddingModality,
    pub vector: Vec<f32>,
}

impl StepEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

pub fn encode_step_text(provider: &dyn EmbeddingProvider, text: &str) -> Result<StepEmbedding> {
    if text.trim().is_empty() {
        return Err(Error::Validation("cannot encode empty step text".into()));
    }
    let vector = provider.encode_text(text)?;
    check_dim(provider, vector.len(), provider.text_dim())?;
    Ok(StepEmbedding {
        modality: EmbeddingModality::Text,
        vector,
    })
}

pub fn encode_step_image(provider: &dyn EmbeddingProvider, image: &RgbImage) -> Result<StepEmbedding> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Validation("cannot encode an empty image".into()));
    }
    let vector = provider.encode_image(image)?;
    check_dim(provider, vector.len(), provider.image_dim())?;
    Ok(StepEmbedding {
        modality: EmbeddingModality::Image,
        vector,
    })
}

/// Decodes an image file and encodes it.
pub fn encode_image_file(provider: &dyn EmbeddingProvider, path: &Path) -> Result<StepEmbedding> {
    let image = load_rgb(path)?;
    encode_step_image(provider, &image)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

fn check_dim(provider: &dyn EmbeddingProvider, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Validation(format!(
            "provider {} returned dim {got}, reports {want}",
            provider.name()
        )));
    }
    Ok(())
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Numeric("zero-norm or non-finite embedding".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// `100 * max(0, cos(a, b))`.
pub fn clip_score(image_emb: &[f32], text_emb: &[f32]) -> Result<f64> {
    Ok(100.0 * cosine(image_emb, text_emb)?.max(0.0))
}

/// Deterministic stand-in encoder. Texts become the normalized sum of
/// per-token Gaussian vectors; images become a fixed Gaussian projection of
/// 8x8 patch means. Both outputs are unit-norm.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    seed: u64,
    dim: usize,
    image_proj: Vec<f32>,
}

const TOY_GRID: usize = 8;
const TOY_IMAGE_FEATURES: usize = TOY_GRID * TOY_GRID * 3 + 1;

impl ToyEncoder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, Self::DEFAULT_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        let mut rng = rng_for(seed, "toy-encoder/image-projection");
        let scale = 1.0 / (TOY_IMAGE_FEATURES as f64).sqrt();
        let image_proj = (0..dim * TOY_IMAGE_FEATURES)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        ToyEncoder { seed, dim, image_proj }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = rng_for(self.seed, &format!("toy-encoder/token/{token}"));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

fn normalize(v: Vec<f64>) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numeric("toy encoder produced a zero vector".into()));
    }
    Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
}

/// Per-channel means over an 8x8 grid of the image, scaled to [-1, 1].
fn patch_means(image: &RgbImage) -> Vec<f64> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut sums = vec![0.0f64; TOY_GRID * TOY_GRID * 3];
    let mut counts = vec![0usize; TOY_GRID * TOY_GRID];
    for (x, y, px) in image.enumerate_pixels() {
        let cx = x as usize * TOY_GRID / w;
        let cy = y as usize * TOY_GRID / h;
        let cell = cy * TOY_GRID + cx;
        counts[cell] += 1;
        for c in 0..3 {
            sums[cell * 3 + c] += px.0[c] as f64;
        }
    }
    sums.iter()
        .enumerate()
        .map(|(i, s)| {
            let n = counts[i / 3].max(1) as f64;
            s / n / 127.5 - 1.0
        })
        .collect()
}

impl EmbeddingProvider for ToyEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn text_dim(&self) -> usize {
        self.dim
    }

    fn image_dim(&self) -> usize {
        self.dim
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        let lowered = text.to_lowercase();
        let mut tokens: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let fallback = format!("#{:016x}", stable_hash(text.as_bytes()));
        if tokens.is_empty() {
            tokens.push(&fallback);
        }
        let mut acc = vec![0.0f64; self.dim];
        for token in tokens {
            for (a, t) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += t;
            }
        }
        normalize(acc)
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let mut feats = patch_means(image);
        feats.push(1.0);
        let out = (0..self.dim)
            .map(|row| {
                self.image_proj[row * TOY_IMAGE_FEATURES..(row + 1) * TOY_IMAGE_FEATURES]
                    .iter()
                    .zip(&feats)
                    .map(|(&w, &f)| w as f64 * f)
                    .sum()
            })
            .collect();
        normalize(out)
    }
}

/// Maps provider vectors of one modality to the shared memory width.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    mlp: Mlp,
    out_dim: usize,
}

impl ProjectionHead {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(ProjectionHead {
            mlp: Mlp::new(p, in_dim, out_dim, out_dim)?,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.mlp.forward(xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use image::Rgb;

    #[test]
    fn text_is_deterministic_and_unit_norm() {
        let enc = ToyEncoder::new(0);
        let a = encode_step_text(&enc, "Add oil to the pan and fry the hash browns").unwrap();
        let b = encode_step_text(&enc, "Add oil to the pan and fry the hash browns").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 64);
        let n: f64 = a.vector.iter().map(|&x| (x as f64).powi(2)).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn distinct_texts_separate() {
        let enc = ToyEncoder::new(0);
        let a = enc.encode_text("slice the tomatoes").unwrap();
        let b = enc.encode_text("boil the pasta").unwrap();
        assert!(cosine(&a, &b).unwrap() < 1.0 - 1e-6);
    }

    #[test]
    fn empty_text_rejected() {
        let enc = ToyEncoder::new(0);
        assert!(matches!(encode_step_text(&enc, "   "), Err(Error::Validation(_))));
    }

    #[test]
    fn black_and_white_images_differ() {
        let enc = ToyEncoder::new(0);
        let black = RgbImage::from_pixel(256, 256, Rgb([0, 0, 0]));
        let white = RgbImage::from_pixel(256, 256, Rgb([255, 255, 255]));
        let a = encode_step_image(&enc, &black).unwrap();
        let b = encode_step_image(&enc, &white).unwrap();
        assert_eq!(a.dim(), 64);
        assert_ne!(a.vector, b.vector);
        assert_eq!(a, encode_step_image(&enc, &black).unwrap());
    }

    #[test]
    fn clip_score_reference_cases() {
        let x = [0.6f32, 0.8, 0.0];
        assert!((clip_score(&x, &x).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(clip_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(clip_score(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(clip_score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn corrupt_image_file_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        let enc = ToyEncoder::new(0);
        assert!(matches!(encode_image_file(&enc, &path), Err(Error::Image { .. })));
    }

    #[test]
    fn projection_heads_share_output_width() {
        let store = ParamStore::new(0, DType::F32);
        let text = ProjectionHead::new(&store.root().pp("t"), 64, 32).unwrap();
        let image = ProjectionHead::new(&store.root().pp("i"), 48, 32).unwrap();
        let xt = Tensor::zeros((3, 64), DType::F32, &Device::Cpu).unwrap();
        let xi = Tensor::zeros((3, 48), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(text.forward(&xt).unwrap().dims(), &[3, 32]);
        assert_eq!(image.forward(&xi).unwrap().dims(), &[3, 32]);
    }
}

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::denoiser::BackboneAdapter;
use super::model::{conditioning_for, ImageEmbeddingCache, ProceduralDiffusion, RecipeConditioning};
use super::train::normal_tensor;
use crate::encoder::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::imaging::tensor_to_image;
use crate::procedure::PromptSequence;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Ancestral sampling over every timestep.
    Ddpm,
    /// Deterministic strided sampling.
    Ddim,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Timestep stride for `Ddim`; ignored by `Ddpm`.
    pub stride: usize,
    pub seed: u64,
    /// Clamp the `x_0` estimate to `[-1, 1]` at every step.
    pub clip: bool,
    /// Guidance scale `w`: `eps = eps_null + w (eps_cond - eps_null)`, where
    /// the null branch sees zero context and memory rows. `1` disables it.
    #[serde(default = "unit_guidance")]
    pub guidance: f64,
}

fn unit_guidance() -> f64 {
    1.0
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddpm,
            stride: 1,
            seed: 0,
            clip: true,
            guidance: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn ddim(stride: usize, seed: u64) -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddim,
            stride,
            seed,
            clip: true,
            guidance: 1.0,
        }
    }
}

/// Generates one image for step `position` (1-based). All randomness comes
/// from `(seed, position)`, so a step's output depends only on its own
/// conditioning.
pub fn sample_step(
    model: &ProceduralDiffusion,
    position: usize,
    context: &Tensor,
    memory: Option<&Tensor>,
    sampler: &SamplerConfig,
) -> Result<Tensor> {
    let cfg = model.backbone.denoiser.config();
    let s = cfg.image_size;
    let shape = [1, 3, s, s];
    let (dtype, device) = (model.dtype(), model.device().clone());
    let mut rng = rng_for(sampler.seed, &format!("sample/step/{position}"));
    let mut x = normal_tensor(&mut rng, &shape, dtype, &device)?;
    let schedule = &model.schedule;
    let null_context = context.zeros_like()?;
    let null_memory = memory.map(Tensor::zeros_like).transpose()?;
    let predict = |x: &Tensor, t: usize| -> Result<Tensor> {
        let cond = model.predict_noise(x, &[t], context, memory)?;
        if sampler.guidance == 1.0 {
            return Ok(cond);
        }
        let null = model.predict_noise(x, &[t], &null_context, null_memory.as_ref())?;
        Ok((&null + ((cond - &null)? * sampler.guidance)?)?)
    };
    match sampler.kind {
        SamplerKind::Ddpm => {
            for t in (1..=schedule.timesteps()).rev() {
                let eps = predict(&x, t)?;
                let noise = if t > 1 {
                    normal_tensor(&mut rng, &shape, dtype, &device)?
                } else {
                    x.zeros_like()?
                };
                x = schedule.ddpm_step(&x, t, &eps, &noise, sampler.clip)?.detach();
            }
        }
        SamplerKind::Ddim => {
            let ts = schedule.strided_timesteps(sampler.stride);
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = ts.get(i + 1).copied().unwrap_or(0);
                let eps = predict(&x, t)?;
                x = schedule.ddim_step(&x, t, t_prev, &eps, sampler.clip)?.detach();
            }
        }
    }
    model.backbone.decode_latent(&x)
}

/// Generates all steps of a recipe: step `j` is conditioned on its text and,
/// when the model has a memory net, on `m_j`.
pub fn sample_procedure(
    model: &ProceduralDiffusion,
    conditioning: &RecipeConditioning,
    sampler: &SamplerConfig,
) -> Result<Vec<RgbImage>> {
    // Detached: sampling never backpropagates, and an attached graph would
    // keep every step's activations alive.
    let memory = model
        .procedural_memory(conditioning.memory_input.as_ref())?
        .map(|m| m.vectors.detach());
    let context = conditioning.context()?;
    let mut images = Vec::with_capacity(conditioning.len());
    for j in 0..conditioning.len() {
        let ctx = context.narrow(0, j, 1)?;
        let m = match &memory {
            Some(m) => Some(m.narrow(0, j, 1)?),
            None => None,
        };
        let x = sample_step(model, j + 1, &ctx, m.as_ref(), sampler)?;
        images.push(tensor_to_image(&x.squeeze(0)?)?);
    }
    Ok(images)
}

/// Encodes `sequence` and samples it, rejecting scenarios the model's memory
/// net cannot consume.
pub fn sample_sequence(
    model: &ProceduralDiffusion,
    sequence: &PromptSequence,
    provider: &dyn EmbeddingProvider,
    cache: &mut ImageEmbeddingCache,
    sampler: &SamplerConfig,
) -> Result<Vec<RgbImage>> {
    model.check_scenario(sequence.kind)?;
    let conditioning = conditioning_for(
        sequence,
        model.memory_kind(),
        provider,
        cache,
        model.dtype(),
        model.device(),
    )?;
    sample_procedure(model, &conditioning, sampler)
}

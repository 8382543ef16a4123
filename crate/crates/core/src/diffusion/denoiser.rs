//! The pixel-space toy denoiser and the backbone contract it implements.
//!
//! Layout (base width `C`, input `3 x S x S`):
//!
//! ```text
//! conv_in -> res0 (C, S)            -> skip0
//!         -> down0 (stride 2)
//!         -> res1 + xattn1 (2C, S/2) -> skip1
//!         -> down1 (stride 2)
//! mid:       res + xattn (2C, S/4)
//! up1:       upsample, cat skip1, res (2C, S/2)
//! up0:       upsample, cat skip0, res (C, S)
//! out:       norm, silu, conv -> 3
//! ```
//!
//! Every residual block receives the conditioned timestep embedding through
//! its own affine map. The down path is a separate type so a control branch
//! can own a copy of it.

use candle_core::{DType, Device, Tensor};
use candle_nn::{GroupNorm, Linear, Module};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, group_norm, linear, sinusoidal, softmax_last, Conv2d, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub time_dim: usize,
    /// Width of the text conditioning tokens.
    pub context_dim: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            base_channels: 16,
            time_dim: 128,
            context_dim: 64,
            groups: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 || self.image_size == 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.base_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "base width {} not divisible by {} norm groups",
                self.base_channels, self.groups
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features of the timestep followed by a two-layer perceptron.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    fc1: Linear,
    fc2: Linear,
    freq_dim: usize,
    dtype: DType,
    device: Device,
}

impl TimestepEmbedder {
    pub fn new(p: &Params, time_dim: usize) -> Result<Self> {
        let freq_dim = 64;
        Ok(TimestepEmbedder {
            fc1: linear(&p.pp("fc1"), freq_dim, time_dim)?,
            fc2: linear(&p.pp("fc2"), time_dim, time_dim)?,
            freq_dim,
            dtype: p.dtype(),
            device: p.device().clone(),
        })
    }

    pub fn forward(&self, ts: &[usize]) -> Result<Tensor> {
        let pos: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let feats = sinusoidal(&pos, self.freq_dim, self.dtype, &self.device)?;
        let h = self.fc1.forward(&feats)?.silu()?;
        Ok(self.fc2.forward(&h)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(p: &Params, in_ch: usize, out_ch: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(ResBlock {
            norm1: group_norm(&p.pp("norm1"), groups, in_ch)?,
            conv1: conv2d(&p.pp("conv1"), in_ch, out_ch, 3, 1, 1)?,
            emb: linear(&p.pp("emb"), time_dim, out_ch)?,
            norm2: group_norm(&p.pp("norm2"), groups, out_ch)?,
            conv2: conv2d(&p.pp("conv2"), out_ch, out_ch, 3, 1, 1)?,
            skip: if in_ch != out_ch {
                Some(conv2d(&p.pp("skip"), in_ch, out_ch, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, xs: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(xs)?.silu()?)?;
        let shift = self.emb.forward(&emb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&shift)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(xs)?,
            None => xs.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head attention from spatial positions to a few context tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    channels: usize,
}

impl CrossAttention {
    pub fn new(p: &Params, channels: usize, context_dim: usize, groups: usize) -> Result<Self> {
        Ok(CrossAttention {
            norm: group_norm(&p.pp("norm"), groups, channels)?,
            q: linear(&p.pp("q"), channels, channels)?,
            k: linear(&p.pp("k"), context_dim, channels)?,
            v: linear(&p.pp("v"), context_dim, channels)?,
            out: linear(&p.pp("out"), channels, channels)?,
            channels,
        })
    }

    /// `xs` is `(B, C, H, W)`, `context` is `(B, L, context_dim)`.
    pub fn forward(&self, xs: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let tokens = self
            .norm
            .forward(xs)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.q.forward(&tokens)?;
        let k = self.k.forward(context)?;
        let v = self.v.forward(context)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.channels as f64).sqrt())?;
        let attended = softmax_last(&scores)?.matmul(&v)?;
        let out = self
            .out
            .forward(&attended)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, h, w))?;
        Ok((xs + out)?)
    }
}

/// Feature maps the down path hands to the rest of the network.
#[derive(Debug, Clone)]
pub struct DownFeatures {
    pub skip0: Tensor,
    pub skip1: Tensor,
    pub bottom: Tensor,
}

#[derive(Debug, Clone)]
pub struct DownPath {
    conv_in: Conv2d,
    res0: ResBlock,
    down0: Conv2d,
    res1: ResBlock,
    attn1: CrossAttention,
    down1: Conv2d,
}

impl DownPath {
    pub fn new(p: &Params, cfg: &DenoiserConfig) -> Result<Self> {
        Self::with_attention_params(p, p, cfg)
    }

    /// Builds the path with the cross-attention's parameters taken from
    /// `attn_p` (used to leave only the attention trainable).
    pub fn with_attention_params(p: &Params, attn_p: &Params, cfg: &DenoiserConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let g = cfg.groups;
        Ok(DownPath {
            conv_in: conv2d(&p.pp("conv_in"), 3, c, 3, 1, 1)?,
            res0: ResBlock::new(&p.pp("res0"), c, c, cfg.time_dim, g)?,
            down0: conv2d(&p.pp("down0"), c, c, 3, 2, 1)?,
            res1: ResBlock::new(&p.pp("res1"), c, 2 * c, cfg.time_dim, g)?,
            attn1: CrossAttention::new(&attn_p.pp("attn1"), 2 * c, cfg.context_dim, g)?,
            down1: conv2d(&p.pp("down1"), 2 * c, 2 * c, 3, 2, 1)?,
        })
    }

    pub fn forward(&self, xs: &Tensor, emb: &Tensor, context: &Tensor) -> Result<DownFeatures> {
        let h = self.conv_in.forward(xs)?;
        let skip0 = self.res0.forward(&h, emb)?;
        let h = self.down0.forward(&skip0)?;
        let h = self.res1.forward(&h, emb)?;
        let skip1 = self.attn1.forward(&h, context)?;
        let bottom = self.down1.forward(&skip1)?;
        Ok(DownFeatures { skip0, skip1, bottom })
    }
}

/// Additive residuals a control branch injects: one per skip connection and
/// one after the middle block.
#[derive(Debug, Clone)]
pub struct ControlResiduals {
    pub skip0: Tensor,
    pub skip1: Tensor,
    pub mid: Tensor,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: DenoiserConfig,
    down: DownPath,
    mid_res: ResBlock,
    mid_attn: CrossAttention,
    up1: ResBlock,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl ToyDenoiser {
    pub fn new(p: &Params, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let g = cfg.groups;
        Ok(ToyDenoiser {
            down: DownPath::new(&p.pp("down"), &cfg)?,
            mid_res: ResBlock::new(&p.pp("mid_res"), 2 * c, 2 * c, cfg.time_dim, g)?,
            mid_attn: CrossAttention::new(&p.pp("mid_attn"), 2 * c, cfg.context_dim, g)?,
            up1: ResBlock::new(&p.pp("up1"), 4 * c, 2 * c, cfg.time_dim, g)?,
            up0: ResBlock::new(&p.pp("up0"), 3 * c, c, cfg.time_dim, g)?,
            norm_out: group_norm(&p.pp("norm_out"), g, c)?,
            conv_out: conv2d(&p.pp("conv_out"), c, 3, 3, 1, 1)?,
            cfg,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn check_inputs(&self, xs: &Tensor, emb: &Tensor, context: &Tensor) -> Result<()> {
        let (b, c, h, w) = xs.dims4()?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Validation(format!(
                "denoiser expects (B, 3, {s}, {s}), got {:?}",
                xs.dims()
            )));
        }
        if emb.dims() != [b, self.cfg.time_dim] {
            return Err(Error::Validation(format!(
                "embedding shape {:?}, expected ({b}, {})",
                emb.dims(),
                self.cfg.time_dim
            )));
        }
        let (cb, _, cd) = context.dims3()?;
        if cb != b || cd != self.cfg.context_dim {
            return Err(Error::Validation(format!(
                "context shape {:?}, expected ({b}, L, {})",
                context.dims(),
                self.cfg.context_dim
            )));
        }
        Ok(())
    }

    /// Predicted noise for `xs`, given the (possibly memory-conditioned)
    /// timestep embedding and the text context tokens.
    pub fn forward(
        &self,
        xs: &Tensor,
        emb: &Tensor,
        context: &Tensor,
        control: Option<&ControlResiduals>,
    ) -> Result<Tensor> {
        self.check_inputs(xs, emb, context)?;
        let DownFeatures {
            mut skip0,
            mut skip1,
            bottom,
        } = self.down.forward(xs, emb, context)?;
        let mut h = self.mid_res.forward(&bottom, emb)?;
        h = self.mid_attn.forward(&h, context)?;
        if let Some(ctrl) = control {
            skip0 = (skip0 + &ctrl.skip0)?;
            skip1 = (skip1 + &ctrl.skip1)?;
            h = (h + &ctrl.mid)?;
        }
        let (_, _, h1, w1) = skip1.dims4()?;
        let h = h.upsample_nearest2d(h1, w1)?;
        let h = self.up1.forward(&Tensor::cat(&[&h, &skip1], 1)?, emb)?;
        let (_, _, h0, w0) = skip0.dims4()?;
        let h = h.upsample_nearest2d(h0, w0)?;
        let h = self.up0.forward(&Tensor::cat(&[&h, &skip0], 1)?, emb)?;
        let h = self.norm_out.forward(&h)?.silu()?;
        Ok(self.conv_out.forward(&h)?)
    }
}

/// A denoising backbone a memory net can be attached to: it exposes the
/// timestep embedding it consumes and accepts a replacement embedding.
pub trait BackboneAdapter {
    fn time_dim(&self) -> usize;
    fn context_dim(&self) -> usize;
    /// `(B, time_dim)` embedding of the given timesteps.
    fn time_embedding(&self, ts: &[usize]) -> Result<Tensor>;
    /// Noise prediction with an explicit timestep embedding.
    fn predict_noise(&self, latents: &Tensor, emb: &Tensor, context: &Tensor) -> Result<Tensor>;
    /// Noise prediction through the backbone's own timestep path.
    fn predict_noise_at(&self, latents: &Tensor, ts: &[usize], context: &Tensor) -> Result<Tensor> {
        let emb = self.time_embedding(ts)?;
        self.predict_noise(latents, &emb, context)
    }
    fn encode_latent(&self, images: &Tensor) -> Result<Tensor>;
    fn decode_latent(&self, latents: &Tensor) -> Result<Tensor>;
}

/// The toy denoiser with its timestep embedder. Pixel space, so the latent
/// maps are the identity.
pub struct ToyBackbone {
    pub denoiser: ToyDenoiser,
    pub time: TimestepEmbedder,
}

impl ToyBackbone {
    pub fn new(p: &Params, cfg: DenoiserConfig) -> Result<Self> {
        Ok(ToyBackbone {
            denoiser: ToyDenoiser::new(&p.pp("denoiser"), cfg)?,
            time: TimestepEmbedder::new(&p.pp("time"), cfg.time_dim)?,
        })
    }

    pub fn predict_with_control(
        &self,
        latents: &Tensor,
        emb: &Tensor,
        context: &Tensor,
        control: Option<&ControlResiduals>,
    ) -> Result<Tensor> {
        self.denoiser.forward(latents, emb, context, control)
    }
}

impl BackboneAdapter for ToyBackbone {
    fn time_dim(&self) -> usize {
        self.denoiser.cfg.time_dim
    }

    fn context_dim(&self) -> usize {
        self.denoiser.cfg.context_dim
    }

    fn time_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        self.time.forward(ts)
    }

    fn predict_noise(&self, latents: &Tensor, emb: &Tensor, context: &Tensor) -> Result<Tensor> {
        self.denoiser.forward(latents, emb, context, None)
    }

    fn encode_latent(&self, images: &Tensor) -> Result<Tensor> {
        Ok(images.clone())
    }

    fn decode_latent(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.clone())
    }
}

//! Control-branch baseline: a trainable copy of the denoiser's down path
//! whose zero-initialized outputs are added to the frozen denoiser's skips
//! and middle block. The text variant feeds the branch a causal procedural
//! representation in place of the prompt; the image variant adds a temporal
//! projection of the previous keyframes to the noisy input.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Module;
use serde::{Deserialize, Serialize};

use crate::diffusion::denoiser::{BackboneAdapter, ControlResiduals, DenoiserConfig, DownPath, ToyBackbone};
use crate::diffusion::schedule::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::memory::{MemoryConfig, MemoryInput, MemoryKind, MemoryNet};
use crate::nn::{conv2d, conv2d_zero, Conv2d, Init, ParamStore, Params};

pub const TEMPORAL_KERNEL: usize = 3;
const SPATIAL_LAYERS: usize = 7;
const TP_B_TEMPORAL_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TpVariant {
    /// A temporal convolution after every spatial convolution.
    A,
    /// Temporal convolutions stacked in front of the spatial stack.
    B,
}

impl fmt::Display for TpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TpVariant::A => "A",
            TpVariant::B => "B",
        })
    }
}

impl FromStr for TpVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(TpVariant::A),
            "B" | "b" => Ok(TpVariant::B),
            other => Err(Error::Config(format!("unknown temporal projection `{other}`"))),
        }
    }
}

/// Convolution along the leading (step) axis of a `(N, C, H, W)` sequence,
/// left-padded with `kernel - 1` zero frames: output `j` reads inputs
/// `j - kernel + 1 ..= j`.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    /// `(kernel, C_out, C_in)`; tap `k` multiplies frame `j - (kernel - 1) + k`.
    weight: Tensor,
    bias: Tensor,
}

impl TemporalConv {
    pub fn new(p: &Params, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Ok(TemporalConv {
            weight: p.get(&[kernel, out_ch, in_ch], "weight", Init::Uniform(bound))?,
            bias: p.get(&[out_ch], "bias", Init::Uniform(bound))?,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = xs.dims4()?;
        let kernel = self.kernel();
        let pad = Tensor::zeros((kernel - 1, c, h, w), xs.dtype(), xs.device())?;
        // (N + K - 1, H, W, C)
        let padded = Tensor::cat(&[&pad, xs], 0)?.permute((0, 2, 3, 1))?;
        let mut acc: Option<Tensor> = None;
        for k in 0..kernel {
            let frames = padded.narrow(0, k, n)?.contiguous()?;
            let wk = self.weight.get(k)?.t()?;
            let term = frames.broadcast_matmul(&wk)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        let out = acc.expect("kernel >= 1").broadcast_add(&self.bias)?;
        Ok(out.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

/// Projection of a keyframe sequence onto the latent grid. Output row `j`
/// depends only on frames before `j`; row 0 (no history) is exactly zero.
#[derive(Debug, Clone)]
pub struct TemporalProjection {
    variant: TpVariant,
    spatial: Vec<Conv2d>,
    temporal: Vec<TemporalConv>,
    out: Conv2d,
}

impl TemporalProjection {
    /// `width` is the channel count of the inner layers.
    pub fn new(p: &Params, variant: TpVariant, width: usize) -> Result<Self> {
        let mut spatial = Vec::with_capacity(SPATIAL_LAYERS);
        let mut temporal = Vec::new();
        let mut ch = 3;
        if variant == TpVariant::B {
            for i in 0..TP_B_TEMPORAL_LAYERS {
                temporal.push(TemporalConv::new(
                    &p.pp(&format!("temporal{i}")),
                    3,
                    3,
                    TEMPORAL_KERNEL,
                )?);
            }
        }
        for i in 0..SPATIAL_LAYERS {
            spatial.push(conv2d(&p.pp(&format!("spatial{i}")), ch, width, 3, 1, 1)?);
            if variant == TpVariant::A {
                temporal.push(TemporalConv::new(
                    &p.pp(&format!("temporal{i}")),
                    width,
                    width,
                    TEMPORAL_KERNEL,
                )?);
            }
            ch = width;
        }
        Ok(TemporalProjection {
            variant,
            spatial,
            temporal,
            out: conv2d_zero(&p.pp("out"), width, 3)?,
        })
    }

    pub fn variant(&self) -> TpVariant {
        self.variant
    }

    pub fn temporal(&self) -> &[TemporalConv] {
        &self.temporal
    }

    pub fn spatial(&self) -> &[Conv2d] {
        &self.spatial
    }

    pub fn out_conv(&self) -> &Conv2d {
        &self.out
    }

    /// Layers applied to the shifted sequence, before the zero output conv
    /// and the step-1 mask.
    pub fn features(&self, shifted: &Tensor) -> Result<Tensor> {
        let mut h = shifted.clone();
        match self.variant {
            TpVariant::A => {
                for (i, (s, t)) in self.spatial.iter().zip(&self.temporal).enumerate() {
                    h = t.forward(&s.forward(&h)?)?;
                    if i + 1 < self.spatial.len() {
                        h = h.silu()?;
                    }
                }
            }
            TpVariant::B => {
                for t in &self.temporal {
                    h = t.forward(&h)?.silu()?;
                }
                for (i, s) in self.spatial.iter().enumerate() {
                    h = s.forward(&h)?;
                    if i + 1 < self.spatial.len() {
                        h = h.silu()?;
                    }
                }
            }
        }
        Ok(h)
    }

    /// `frames` is the `(N, 3, S, S)` keyframe sequence of one recipe.
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = frames.dims4()?;
        if c != 3 {
            return Err(Error::Validation(format!(
                "temporal projection expects 3-channel frames, got {c}"
            )));
        }
        let shifted = shift_frames(frames)?;
        let out = self.out.forward(&self.features(&shifted)?)?;
        let mut mask = vec![1f32; n];
        mask[0] = 0.0;
        let mask = Tensor::from_vec(mask, (n, 1, 1, 1), frames.device())?.to_dtype(frames.dtype())?;
        let out = out.broadcast_mul(&mask)?;
        debug_assert_eq!(out.dims(), &[n, 3, h, w]);
        Ok(out)
    }
}

/// Row `j` of the result is frame `j - 1`; row 0 is zero.
pub fn shift_frames(frames: &Tensor) -> Result<Tensor> {
    let n = frames.dim(0)?;
    let zero = frames.narrow(0, 0, 1)?.zeros_like()?;
    if n == 1 {
        return Ok(zero);
    }
    Ok(Tensor::cat(&[&zero, &frames.narrow(0, 0, n - 1)?], 0)?)
}

/// Down-path copy with zero-initialized 1x1 output convolutions.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    down: DownPath,
    zero_skip0: Conv2d,
    zero_skip1: Conv2d,
    zero_mid: Conv2d,
}

impl ControlBranch {
    /// `down_p` holds the copied down path; `attn_p` its cross-attention
    /// (pass the same path twice for a fully shared freeze state).
    pub fn new(down_p: &Params, attn_p: &Params, zero_p: &Params, cfg: &DenoiserConfig) -> Result<Self> {
        let c = cfg.base_channels;
        Ok(ControlBranch {
            down: DownPath::with_attention_params(down_p, attn_p, cfg)?,
            zero_skip0: conv2d_zero(&zero_p.pp("skip0"), c, c)?,
            zero_skip1: conv2d_zero(&zero_p.pp("skip1"), 2 * c, 2 * c)?,
            zero_mid: conv2d_zero(&zero_p.pp("mid"), 2 * c, 2 * c)?,
        })
    }

    pub fn forward(&self, xs: &Tensor, emb: &Tensor, context: &Tensor) -> Result<ControlResiduals> {
        let f = self.down.forward(xs, emb, context)?;
        Ok(ControlResiduals {
            skip0: self.zero_skip0.forward(&f.skip0)?,
            skip1: self.zero_skip1.forward(&f.skip1)?,
            mid: self.zero_mid.forward(&f.bottom)?,
        })
    }
}

fn check_batch(latents: &Tensor, other: &Tensor, what: &str) -> Result<()> {
    if latents.dim(0)? != other.dim(0)? {
        return Err(Error::Validation(format!(
            "{what} batch {} differs from latent batch {}",
            other.dim(0)?,
            latents.dim(0)?
        )));
    }
    Ok(())
}

/// Residuals from the branch driven by procedural text representations
/// `(B, D_m)`, which take the place of the prompt tokens.
pub fn control_text_forward(
    latents: &Tensor,
    procedural: &Tensor,
    emb: &Tensor,
    branch: &ControlBranch,
) -> Result<ControlResiduals> {
    if procedural.rank() != 2 {
        return Err(Error::Validation(format!(
            "procedural representation must be (B, D_m), got {:?}",
            procedural.dims()
        )));
    }
    check_batch(latents, procedural, "procedural representation")?;
    branch.forward(latents, emb, &procedural.unsqueeze(1)?)
}

/// Residuals from the branch fed `latents + projected`, where `projected`
/// holds the temporal projection rows of the batch's steps.
pub fn control_image_forward(
    latents: &Tensor,
    projected: &Tensor,
    emb: &Tensor,
    context: &Tensor,
    branch: &ControlBranch,
) -> Result<ControlResiduals> {
    if latents.dims() != projected.dims() {
        return Err(Error::Validation(format!(
            "projected history {:?} differs from latents {:?}",
            projected.dims(),
            latents.dims()
        )));
    }
    branch.forward(&(latents + projected)?, emb, context)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    ControlnetText,
    ControlnetImage,
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlKind::ControlnetText => "controlnet_text",
            ControlKind::ControlnetImage => "controlnet_image",
        })
    }
}

impl FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "controlnet_text" => Ok(ControlKind::ControlnetText),
            "controlnet_image" => Ok(ControlKind::ControlnetImage),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub kind: ControlKind,
    pub tp: TpVariant,
    pub tp_width: usize,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// Width of the prompt encoder, the input of the text variant's memory.
    pub text_dim: usize,
    pub memory_heads: usize,
}

impl ControlConfig {
    pub fn new(kind: ControlKind, denoiser: DenoiserConfig, schedule: ScheduleConfig, text_dim: usize) -> Self {
        ControlConfig {
            kind,
            tp: TpVariant::A,
            tp_width: 16,
            denoiser,
            schedule,
            text_dim,
            memory_heads: 4,
        }
    }

    /// The text variant's memory is causal and as wide as the prompt tokens
    /// it replaces.
    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig::new(MemoryKind::Tmn, self.text_dim, self.text_dim)
            .with_dim(self.denoiser.context_dim, self.memory_heads)
    }
}

/// Procedural input of one batch.
#[derive(Debug, Clone)]
pub enum ControlInput {
    /// `(B, D_m)` memory rows for the text variant.
    Text(Tensor),
    /// `(B, 3, S, S)` projected keyframe history for the image variant.
    Image(Tensor),
}

/// Frozen base denoiser plus the trainable control branch.
pub struct ControlNetModel {
    pub config: ControlConfig,
    pub store: ParamStore,
    pub backbone: ToyBackbone,
    pub branch: ControlBranch,
    pub memory: Option<MemoryNet>,
    pub tp: Option<TemporalProjection>,
    pub schedule: NoiseSchedule,
}

impl ControlNetModel {
    pub fn new(config: ControlConfig, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let backbone = ToyBackbone::new(&root.pp("backbone").frozen(true), config.denoiser)?;
        let ctrl = root.pp("control");
        let (branch, memory, tp) = match config.kind {
            ControlKind::ControlnetText => (
                ControlBranch::new(
                    &ctrl.pp("down").frozen(true),
                    &ctrl.pp("down"),
                    &ctrl.pp("zero"),
                    &config.denoiser,
                )?,
                Some(MemoryNet::new(&root.pp("memory"), config.memory_config())?),
                None,
            ),
            ControlKind::ControlnetImage => (
                ControlBranch::new(&ctrl.pp("down"), &ctrl.pp("down"), &ctrl.pp("zero"), &config.denoiser)?,
                None,
                Some(TemporalProjection::new(&root.pp("tp"), config.tp, config.tp_width)?),
            ),
        };
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        Ok(ControlNetModel {
            config,
            store,
            backbone,
            branch,
            memory,
            tp,
            schedule,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Loads the base denoiser from `base` (names `backbone.*`) and copies
    /// its down path into the branch.
    pub fn init_from_base(&self, base: &ParamStore) -> Result<usize> {
        self.store.copy_from(base, |name| {
            if name.starts_with("backbone.") {
                Some(name.to_string())
            } else {
                name.strip_prefix("control.down.")
                    .map(|rest| format!("backbone.denoiser.down.{rest}"))
            }
        })
    }

    /// Parameters the adapter updates. The base denoiser is never listed;
    /// the text variant leaves the copied down path frozen except for its
    /// cross-attention.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let keep = |name: &str| match self.config.kind {
            ControlKind::ControlnetText => {
                name.starts_with("control.down.attn1.")
                    || name.starts_with("control.zero.")
                    || name.starts_with("memory.")
            }
            ControlKind::ControlnetImage => name.starts_with("control.") || name.starts_with("tp."),
        };
        self.store.named_vars().into_iter().filter(|(n, _)| keep(n)).collect()
    }

    /// Procedural input rows for every step of a recipe: the text variant
    /// runs the causal memory net, the image variant projects the keyframes.
    pub fn procedural_rows(&self, memory_input: Option<&MemoryInput>, frames: Option<&Tensor>) -> Result<ControlInput> {
        match self.config.kind {
            ControlKind::ControlnetText => {
                let net = self.memory.as_ref().expect("text variant has a memory net");
                let input = memory_input.ok_or_else(|| Error::Config("text control branch needs step texts".into()))?;
                Ok(ControlInput::Text(net.forward(input)?.vectors))
            }
            ControlKind::ControlnetImage => {
                let tp = self.tp.as_ref().expect("image variant has a projection");
                let frames = frames.ok_or_else(|| Error::Config("image control branch needs keyframes".into()))?;
                Ok(ControlInput::Image(tp.forward(frames)?))
            }
        }
    }

    pub fn residuals(
        &self,
        latents: &Tensor,
        emb: &Tensor,
        context: &Tensor,
        input: &ControlInput,
    ) -> Result<ControlResiduals> {
        match input {
            ControlInput::Text(m) => control_text_forward(latents, m, emb, &self.branch),
            ControlInput::Image(h) => control_image_forward(latents, h, emb, context, &self.branch),
        }
    }

    pub fn predict_noise(
        &self,
        latents: &Tensor,
        ts: &[usize],
        context: &Tensor,
        input: Option<&ControlInput>,
    ) -> Result<Tensor> {
        let emb = self.backbone.time_embedding(ts)?;
        let control = match input {
            Some(input) => Some(self.residuals(latents, &emb, context, input)?),
            None => None,
        };
        self.backbone
            .predict_with_control(latents, &emb, context, control.as_ref())
    }
}

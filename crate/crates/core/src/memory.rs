//! Memory nets: attention over a recipe's step encodings that produce one
//! procedural representation `m_j` per step, and the zero-initialized head
//! that adds `m_j` onto the denoiser's timestep embedding.
//!
//! * TMN and IMN run a strictly causal pass: `m_j` depends only on steps
//!   `1..j-1`, and `m_1` is the zero vector.
//! * MMN runs a bi-directional pass over the whole mixed sequence.
//!
//! The causal readout is one masked pass over the full sequence, reading
//! position `j-1` for step `j`. That equals re-running attention on each
//! sliced history and taking its last output; the test suite checks the two
//! against each other.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingProvider, ProjectionHead};
use crate::error::{Error, Result};
use crate::nn::{layer_norm, linear, linear_zero, sinusoidal, softmax_last, LayerNorm, Mlp, Params};
use crate::procedure::{Modality, PromptSequence, ScenarioKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Output at position `j` sees inputs at positions `< j` only.
    CausalStrict,
    Full,
}

/// Self-attention block over a `(len, dim)` sequence: pre-norm, multi-head,
/// residual.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl AttentionBlock {
    pub fn new(p: &Params, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionBlock {
            norm: layer_norm(&p.pp("norm"), dim)?,
            q: linear(&p.pp("q"), dim, dim)?,
            k: linear(&p.pp("k"), dim, dim)?,
            v: linear(&p.pp("v"), dim, dim)?,
            out: linear(&p.pp("out"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, xs: &Tensor, mask: MaskMode) -> Result<Tensor> {
        let (len, dim) = xs.dims2()?;
        if dim != self.dim {
            return Err(Error::Validation(format!(
                "attention input width {dim}, block expects {}",
                self.dim
            )));
        }
        let head_dim = dim / self.heads;
        let h = self.norm.forward(xs)?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((len, self.heads, head_dim))?.transpose(0, 1)?.contiguous()?)
        };
        let q = split(self.q.forward(&h)?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if mask == MaskMode::CausalStrict {
            let allowed = Tensor::tril2(len, DType::U8, xs.device())?
                .unsqueeze(0)?
                .broadcast_as(scores.shape())?;
            let blocked = Tensor::full(f64::NEG_INFINITY, scores.shape(), xs.device())?.to_dtype(scores.dtype())?;
            scores = allowed.where_cond(&scores, &blocked)?;
        }
        let probs = softmax_last(&scores)?;
        let attended = probs.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((len, dim))?;
        let ys = (xs + self.out.forward(&attended)?)?;
        match mask {
            MaskMode::Full => Ok(ys),
            MaskMode::CausalStrict => shift_down(&ys),
        }
    }
}

/// Row `j` of the result is row `j-1` of the input; row 0 is zero.
fn shift_down(xs: &Tensor) -> Result<Tensor> {
    let (len, dim) = xs.dims2()?;
    let zero = Tensor::zeros((1, dim), xs.dtype(), xs.device())?;
    if len == 1 {
        return Ok(zero);
    }
    Ok(Tensor::cat(&[&zero, &xs.narrow(0, 0, len - 1)?], 0)?)
}

/// Linear map `D_m -> D_time` that starts at exactly zero.
#[derive(Debug, Clone)]
pub struct FusionHead {
    linear: Linear,
    memory_dim: usize,
    time_dim: usize,
}

impl FusionHead {
    pub fn new(p: &Params, memory_dim: usize, time_dim: usize) -> Result<Self> {
        Ok(FusionHead {
            linear: linear_zero(p, memory_dim, time_dim)?,
            memory_dim,
            time_dim,
        })
    }

    pub fn memory_dim(&self) -> usize {
        self.memory_dim
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn forward(&self, memory: &Tensor) -> Result<Tensor> {
        Ok(self.linear.forward(memory)?)
    }
}

/// `e_j = t_j + head(m_j)`, row-wise over a batch.
pub fn fuse_with_time(time_emb: &Tensor, memory: &Tensor, head: &FusionHead) -> Result<Tensor> {
    let t_dim = time_emb.dim(D::Minus1)?;
    let m_dim = memory.dim(D::Minus1)?;
    if t_dim != head.time_dim || m_dim != head.memory_dim {
        return Err(Error::Validation(format!(
            "fusion head maps {} -> {}, got memory width {m_dim} and time width {t_dim}",
            head.memory_dim, head.time_dim
        )));
    }
    Ok((time_emb + head.forward(memory)?)?)
}

/// Mixes the text and image encodings of one position into a single token.
#[derive(Debug, Clone)]
pub struct TokenMixer {
    mlp: Mlp,
    dim: usize,
}

impl TokenMixer {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(TokenMixer {
            mlp: Mlp::new(p, 2 * dim, dim, dim)?,
            dim,
        })
    }

    /// `text` and `image` are `(len, dim)`; returns `(len, dim)`.
    pub fn forward(&self, text: &Tensor, image: &Tensor) -> Result<Tensor> {
        self.mlp.forward(&Tensor::cat(&[text, image], D::Minus1)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Tmn,
    Imn,
    Mmn,
}

impl MemoryKind {
    pub fn scenario(self) -> ScenarioKind {
        match self {
            MemoryKind::Tmn => ScenarioKind::TextOnly,
            MemoryKind::Imn => ScenarioKind::ImageHistory,
            MemoryKind::Mmn => ScenarioKind::Multimodal,
        }
    }

    pub fn mask(self) -> MaskMode {
        match self {
            MemoryKind::Tmn | MemoryKind::Imn => MaskMode::CausalStrict,
            MemoryKind::Mmn => MaskMode::Full,
        }
    }

    pub fn check_scenario(self, scenario: ScenarioKind) -> Result<()> {
        if self.scenario() != scenario {
            return Err(Error::Config(format!(
                "memory net {self} cannot serve scenario {scenario}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MemoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryKind::Tmn => "tmn",
            MemoryKind::Imn => "imn",
            MemoryKind::Mmn => "mmn",
        })
    }
}

impl FromStr for MemoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tmn" => Ok(MemoryKind::Tmn),
            "imn" => Ok(MemoryKind::Imn),
            "mmn" => Ok(MemoryKind::Mmn),
            other => Err(Error::Config(format!("unknown memory kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub kind: MemoryKind,
    /// Memory width `D_m`.
    pub dim: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub retain_text: bool,
}

impl MemoryConfig {
    pub fn new(kind: MemoryKind, text_dim: usize, image_dim: usize) -> Self {
        MemoryConfig {
            kind,
            dim: 256,
            heads: 4,
            text_dim,
            image_dim,
            retain_text: false,
        }
    }

    pub fn with_dim(mut self, dim: usize, heads: usize) -> Self {
        self.dim = dim;
        self.heads = heads;
        self
    }
}

/// Per-step procedural representations, `(N, D_m)`.
#[derive(Debug, Clone)]
pub struct ProceduralMemory {
    pub kind: MemoryKind,
    pub vectors: Tensor,
}

impl ProceduralMemory {
    pub fn len(&self) -> usize {
        self.vectors.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim(1).unwrap_or(0)
    }

    /// Step `j` (1-based) as `f64`.
    pub fn step(&self, j: usize) -> Result<Vec<f64>> {
        crate::nn::to_f64_vec(&self.vectors.get(j - 1)?)
    }
}

/// Encodings of one recipe, aligned by position. Rows of a modality the
/// position does not use are ignored.
#[derive(Debug, Clone)]
pub struct MemoryInput {
    pub text: Option<Tensor>,
    pub image: Option<Tensor>,
    pub modality: Vec<Modality>,
}

impl MemoryInput {
    pub fn text(text: Tensor) -> Result<Self> {
        let n = text.dim(0)?;
        Ok(MemoryInput {
            text: Some(text),
            image: None,
            modality: vec![Modality::Text; n],
        })
    }

    pub fn image(image: Tensor) -> Result<Self> {
        let n = image.dim(0)?;
        Ok(MemoryInput {
            text: None,
            image: Some(image),
            modality: vec![Modality::Image; n],
        })
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }
}

pub struct MemoryNet {
    config: MemoryConfig,
    text_head: ProjectionHead,
    image_head: ProjectionHead,
    mixer: Option<TokenMixer>,
    attention: AttentionBlock,
}

impl MemoryNet {
    pub fn new(p: &Params, config: MemoryConfig) -> Result<Self> {
        let mixer = if config.kind == MemoryKind::Mmn && config.retain_text {
            Some(TokenMixer::new(&p.pp("mixer"), config.dim)?)
        } else {
            None
        };
        Ok(MemoryNet {
            config,
            text_head: ProjectionHead::new(&p.pp("text_head"), config.text_dim, config.dim)?,
            image_head: ProjectionHead::new(&p.pp("image_head"), config.image_dim, config.dim)?,
            mixer,
            attention: AttentionBlock::new(&p.pp("attention"), config.dim, config.heads)?,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn kind(&self) -> MemoryKind {
        self.config.kind
    }

    pub fn attention(&self) -> &AttentionBlock {
        &self.attention
    }

    pub fn text_head(&self) -> &ProjectionHead {
        &self.text_head
    }

    pub fn image_head(&self) -> &ProjectionHead {
        &self.image_head
    }

    pub fn mixer(&self) -> Option<&TokenMixer> {
        self.mixer.as_ref()
    }

    /// Projected encodings plus positional encodings: the attention input.
    pub fn tokens(&self, input: &MemoryInput) -> Result<Tensor> {
        let n = input.len();
        if n == 0 {
            return Err(Error::Validation("memory input is empty".into()));
        }
        let text = match &input.text {
            Some(t) => Some(self.project(&self.text_head, t, self.config.text_dim, n)?),
            None => None,
        };
        let image = match &input.image {
            Some(t) => Some(self.project(&self.image_head, t, self.config.image_dim, n)?),
            None => None,
        };
        let mixed = if input.modality.contains(&Modality::TextImage) {
            let mixer = self
                .mixer
                .as_ref()
                .ok_or_else(|| Error::Config("text+image positions need a memory net with retain_text".into()))?;
            match (&text, &image) {
                (Some(t), Some(i)) => Some(mixer.forward(t, i)?),
                _ => return Err(Error::Validation("text+image positions need both encodings".into())),
            }
        } else {
            None
        };
        let pick = |src: &Option<Tensor>, j: usize, what: &str| -> Result<Tensor> {
            src.as_ref()
                .ok_or_else(|| Error::Validation(format!("position {} lacks {what} encoding", j + 1)))
                .and_then(|t| Ok(t.narrow(0, j, 1)?))
        };
        let rows: Vec<Tensor> = input
            .modality
            .iter()
            .enumerate()
            .map(|(j, m)| match m {
                Modality::Text => pick(&text, j, "text"),
                Modality::Image => pick(&image, j, "image"),
                Modality::TextImage => pick(&mixed, j, "mixed"),
            })
            .collect::<Result<_>>()?;
        let xs = Tensor::cat(&rows, 0)?;
        let positions: Vec<f64> = (1..=n).map(|j| j as f64).collect();
        let pe = sinusoidal(&positions, self.config.dim, xs.dtype(), xs.device())?;
        Ok((xs + pe)?)
    }

    fn project(&self, head: &ProjectionHead, xs: &Tensor, want: usize, n: usize) -> Result<Tensor> {
        let (rows, width) = xs.dims2()?;
        if width != want || rows != n {
            return Err(Error::Validation(format!(
                "encodings of shape ({rows}, {width}), expected ({n}, {want})"
            )));
        }
        head.forward(xs)
    }

    pub fn forward(&self, input: &MemoryInput) -> Result<ProceduralMemory> {
        let xs = self.tokens(input)?;
        let vectors = self.attention.forward(&xs, self.config.kind.mask())?;
        Ok(ProceduralMemory {
            kind: self.config.kind,
            vectors,
        })
    }
}

fn require_kind(net: &MemoryNet, kind: MemoryKind) -> Result<()> {
    if net.kind() != kind {
        return Err(Error::Config(format!(
            "expected a {kind} memory net, got {}",
            net.kind()
        )));
    }
    Ok(())
}

/// Text memory: `m_j` from the text encodings of steps `1..j-1`.
pub fn tmn_forward(net: &MemoryNet, text_embs: &Tensor) -> Result<ProceduralMemory> {
    require_kind(net, MemoryKind::Tmn)?;
    net.forward(&MemoryInput::text(text_embs.clone())?)
}

/// Image memory: `m_j` from the image encodings of steps `1..j-1`.
pub fn imn_forward(net: &MemoryNet, image_embs: &Tensor) -> Result<ProceduralMemory> {
    require_kind(net, MemoryKind::Imn)?;
    net.forward(&MemoryInput::image(image_embs.clone())?)
}

/// Multi-modal memory: every `m_j` attends to the whole mixed sequence.
pub fn mmn_forward(net: &MemoryNet, input: &MemoryInput) -> Result<ProceduralMemory> {
    require_kind(net, MemoryKind::Mmn)?;
    net.forward(input)
}

/// Encodes a prompt sequence with `provider` into the memory net's input.
/// `load_image` maps an image path to its encoding (callers usually cache).
pub fn memory_input_for(
    sequence: &PromptSequence,
    kind: MemoryKind,
    provider: &dyn EmbeddingProvider,
    mut load_image: impl FnMut(&std::path::Path) -> Result<Vec<f32>>,
    dtype: DType,
    device: &Device,
) -> Result<MemoryInput> {
    kind.check_scenario(sequence.kind)?;
    let n = sequence.len();
    let needs_text = sequence.entries.iter().any(|e| e.modality.has_text());
    let needs_image = sequence.entries.iter().any(|e| e.modality.has_image());
    let text = if needs_text {
        let mut data = Vec::with_capacity(n * provider.text_dim());
        for e in &sequence.entries {
            if e.modality.has_text() {
                data.extend(crate::encoder::encode_step_text(provider, &e.text)?.vector);
            } else {
                data.extend(std::iter::repeat(0.0f32).take(provider.text_dim()));
            }
        }
        Some(Tensor::from_vec(data, (n, provider.text_dim()), device)?.to_dtype(dtype)?)
    } else {
        None
    };
    let image = if needs_image {
        let mut data = Vec::with_capacity(n * provider.image_dim());
        for e in &sequence.entries {
            match (&e.image, e.modality.has_image()) {
                (Some(path), true) => data.extend(load_image(path)?),
                (None, true) => {
                    return Err(Error::Config(format!(
                        "position {} is image-bearing but has no image",
                        e.position
                    )))
                }
                _ => data.extend(std::iter::repeat(0.0f32).take(provider.image_dim())),
            }
        }
        Some(Tensor::from_vec(data, (n, provider.image_dim()), device)?.to_dtype(dtype)?)
    } else {
        None
    };
    Ok(MemoryInput {
        text,
        image,
        modality: sequence.entries.iter().map(|e| e.modality).collect(),
    })
}

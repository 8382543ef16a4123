use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::denoiser::{BackboneAdapter, DenoiserConfig, ToyBackbone};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::encoder::{encode_image_file, encode_step_text, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::memory::{memory_input_for, FusionHead, MemoryConfig, MemoryInput, MemoryKind, MemoryNet, ProceduralMemory};
use crate::nn::ParamStore;
use crate::procedure::{PromptSequence, ScenarioKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// `None` trains the plain text-conditioned baseline.
    pub memory: Option<MemoryConfig>,
}

/// `predict_noise` of `backbone` with `head(memory)` added to its timestep
/// embedding. Without memory this is exactly the unwrapped backbone.
pub fn predict_conditioned<B: BackboneAdapter + ?Sized>(
    backbone: &B,
    head: &FusionHead,
    latents: &Tensor,
    ts: &[usize],
    context: &Tensor,
    memory: Option<&Tensor>,
) -> Result<Tensor> {
    let emb = backbone.time_embedding(ts)?;
    let emb = match memory {
        Some(m) => crate::memory::fuse_with_time(&emb, m, head)?,
        None => emb,
    };
    backbone.predict_noise(latents, &emb, context)
}

/// Toy backbone, optional memory net, fusion head and noise schedule, all
/// parameters in one store.
pub struct ProceduralDiffusion {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: ToyBackbone,
    pub memory: Option<MemoryNet>,
    pub fusion: Option<FusionHead>,
    pub schedule: NoiseSchedule,
}

impl ProceduralDiffusion {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let backbone = ToyBackbone::new(&root.pp("backbone"), config.denoiser)?;
        let (memory, fusion) = match &config.memory {
            Some(mc) => (
                Some(MemoryNet::new(&root.pp("memory"), *mc)?),
                Some(FusionHead::new(&root.pp("fusion"), mc.dim, config.denoiser.time_dim)?),
            ),
            None => (None, None),
        };
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        Ok(ProceduralDiffusion {
            config,
            store,
            backbone,
            memory,
            fusion,
            schedule,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn memory_kind(&self) -> Option<MemoryKind> {
        self.memory.as_ref().map(MemoryNet::kind)
    }

    pub fn check_scenario(&self, scenario: ScenarioKind) -> Result<()> {
        match self.memory_kind() {
            Some(kind) => kind.check_scenario(scenario),
            None => Ok(()),
        }
    }

    pub fn procedural_memory(&self, input: Option<&MemoryInput>) -> Result<Option<ProceduralMemory>> {
        match (&self.memory, input) {
            (Some(net), Some(input)) => Ok(Some(net.forward(input)?)),
            (Some(net), None) => Err(Error::Config(format!(
                "{} memory net needs procedural prompts",
                net.kind()
            ))),
            (None, _) => Ok(None),
        }
    }

    /// Noise prediction. `memory` holds one `m_j` row per batch element.
    pub fn predict_noise(
        &self,
        latents: &Tensor,
        ts: &[usize],
        context: &Tensor,
        memory: Option<&Tensor>,
    ) -> Result<Tensor> {
        match (&self.fusion, memory) {
            (Some(head), m) => predict_conditioned(&self.backbone, head, latents, ts, context, m),
            (None, None) => self.backbone.predict_noise_at(latents, ts, context),
            (None, Some(_)) => Err(Error::Config(
                "memory rows given to a model without a memory net".into(),
            )),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        self.store.load(path)
    }
}

/// Everything one recipe contributes to conditioning: pooled text
/// encodings of the conditional prompts and the memory net's input.
#[derive(Debug, Clone)]
pub struct RecipeConditioning {
    pub recipe_id: String,
    /// `(N, D_t)`.
    pub text: Tensor,
    pub memory_input: Option<MemoryInput>,
}

impl RecipeConditioning {
    pub fn len(&self) -> usize {
        self.text.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(N, 1, D_t)` context tokens for the denoiser.
    pub fn context(&self) -> Result<Tensor> {
        Ok(self.text.unsqueeze(1)?)
    }
}

/// Caches image encodings by path.
#[derive(Default)]
pub struct ImageEmbeddingCache {
    cache: HashMap<PathBuf, Vec<f32>>,
}

impl ImageEmbeddingCache {
    pub fn get(&mut self, provider: &dyn EmbeddingProvider, path: &Path) -> Result<Vec<f32>> {
        if let Some(v) = self.cache.get(path) {
            return Ok(v.clone());
        }
        let v = encode_image_file(provider, path)?.vector;
        self.cache.insert(path.to_path_buf(), v.clone());
        Ok(v)
    }
}

pub fn conditioning_for(
    sequence: &PromptSequence,
    memory_kind: Option<MemoryKind>,
    provider: &dyn EmbeddingProvider,
    cache: &mut ImageEmbeddingCache,
    dtype: DType,
    device: &Device,
) -> Result<RecipeConditioning> {
    let n = sequence.len();
    let mut data = Vec::with_capacity(n * provider.text_dim());
    for text in sequence.texts() {
        data.extend(encode_step_text(provider, text)?.vector);
    }
    let text = Tensor::from_vec(data, (n, provider.text_dim()), device)?.to_dtype(dtype)?;
    let memory_input = match memory_kind {
        Some(kind) => Some(memory_input_for(
            sequence,
            kind,
            provider,
            |p| cache.get(provider, p),
            dtype,
            device,
        )?),
        None => None,
    };
    Ok(RecipeConditioning {
        recipe_id: sequence.recipe_id.clone(),
        text,
        memory_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryInput;
    use crate::nn::to_f64_vec;

    fn config(kind: MemoryKind) -> ModelConfig {
        let mut mc = MemoryConfig::new(kind, 64, 64).with_dim(32, 4);
        mc.retain_text = true;
        ModelConfig {
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            memory: Some(mc),
        }
    }

    #[test]
    fn fresh_memory_is_neutral_bitwise() {
        let model = ProceduralDiffusion::new(config(MemoryKind::Mmn), 0, DType::F32).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1., (3, 3, 32, 32), &dev).unwrap();
        let ctx = Tensor::randn(0f32, 1., (3, 1, 64), &dev).unwrap();
        let text = Tensor::randn(0f32, 1., (3, 64), &dev).unwrap();
        let mem = model
            .procedural_memory(Some(&MemoryInput::text(text).unwrap()))
            .unwrap()
            .unwrap();
        let conditioned = model
            .predict_noise(&x, &[5, 500, 999], &ctx, Some(&mem.vectors))
            .unwrap();
        let plain = model.backbone.predict_noise_at(&x, &[5, 500, 999], &ctx).unwrap();
        assert_eq!(to_f64_vec(&conditioned).unwrap(), to_f64_vec(&plain).unwrap());
    }
}

//! Layered run configuration: built-in defaults, then a TOML file, then
//! `section.key=value` overrides, then `PROCDIFF_SECTION__KEY` environment
//! variables. Each layer is merged key by key into the previous one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controlnet::{ControlConfig, ControlKind, TpVariant};
use crate::diffusion::{DenoiserConfig, ModelConfig, SamplerConfig, SamplerKind, ScheduleConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::memory::{MemoryConfig, MemoryKind};
use crate::optim::AdamConfig;
use crate::pipeline::PipelineConfig;
use crate::procedure::{Placement, PromptScenario, ScenarioKind, Split};

pub const ENV_PREFIX: &str = "PROCDIFF_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryChoice {
    None,
    Tmn,
    Imn,
    Mmn,
}

impl MemoryChoice {
    pub fn kind(self) -> Option<MemoryKind> {
        match self {
            MemoryChoice::None => None,
            MemoryChoice::Tmn => Some(MemoryKind::Tmn),
            MemoryChoice::Imn => Some(MemoryKind::Imn),
            MemoryChoice::Mmn => Some(MemoryKind::Mmn),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineChoice {
    None,
    ControlnetText,
    ControlnetImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorChoice {
    Toy,
    Inception,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub split: Split,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    pub p: f64,
    pub placement: Placement,
    pub retain_text: bool,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            kind: ScenarioKind::TextOnly,
            p: 0.5,
            placement: Placement::Ordered,
            retain_text: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    pub kind: MemoryChoice,
    pub dim: usize,
    pub heads: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection {
            kind: MemoryChoice::Tmn,
            dim: 256,
            heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub cond_dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-5,
            epochs: 75,
            batch_size: 8,
            max_steps: None,
            log_every: 50,
            checkpoint_every: 500,
            cond_dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub stride: usize,
    pub clip: bool,
    pub guidance: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerKind::Ddpm,
            stride: 1,
            clip: true,
            guidance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub dim: usize,
    /// Seed of the toy encoder's token and projection tables; independent of
    /// the run seed so every command sees the same embeddings.
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { dim: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidSection {
    pub extractor: ExtractorChoice,
}

impl Default for FidSection {
    fn default() -> Self {
        FidSection {
            extractor: ExtractorChoice::Toy,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub fid: FidSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub kind: BaselineChoice,
    pub tp: TpVariant,
    pub tp_width: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            kind: BaselineChoice::None,
            tp: TpVariant::A,
            tp_width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub scenario: ScenarioSection,
    pub memory: MemorySection,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub encoder: EncoderSection,
    pub pipeline: PipelineConfig,
    pub metrics: MetricsSection,
    pub baseline: BaselineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            scenario: ScenarioSection::default(),
            memory: MemorySection::default(),
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            encoder: EncoderSection::default(),
            pipeline: PipelineConfig::default(),
            metrics: MetricsSection::default(),
            baseline: BaselineSection::default(),
        }
    }
}

/// Overrides that shrink a run to desk scale: narrow memory, a larger
/// learning rate and strided sampling.
pub fn toy_preset() -> Vec<(String, String)> {
    [
        ("memory.dim", "32"),
        ("memory.heads", "4"),
        ("train.lr", "0.002"),
        ("train.epochs", "400"),
        ("train.max_steps", "2000"),
        ("train.log_every", "100"),
        ("sampler.kind", "\"ddim\""),
        ("sampler.stride", "20"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

/// A scalar from a flag or environment variable: TOML syntax when it parses
/// (`3`, `true`, `"x"`, `1e-4`), otherwise the raw string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` descends into a scalar")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` descends into a scalar")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Builder that applies the layers in order.
#[derive(Debug, Clone)]
pub struct ConfigLoader {
    value: toml::Value,
}

impl Default for ConfigLoader {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigLoader {
    pub fn new() -> Self {
        let value = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        ConfigLoader { value }
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layer: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut self.value, toml::Value::Table(layer));
        Ok(self)
    }

    /// `section.key` / raw-value pairs.
    pub fn overrides<K: AsRef<str>, V: AsRef<str>>(mut self, pairs: impl IntoIterator<Item = (K, V)>) -> Result<Self> {
        for (k, v) in pairs {
            set_path(&mut self.value, k.as_ref(), parse_scalar(v.as_ref()))?;
        }
        Ok(self)
    }

    /// `PROCDIFF_TRAIN__LR=1e-4` sets `train.lr`; `__` separates levels.
    pub fn env<K: AsRef<str>, V: AsRef<str>>(self, vars: impl IntoIterator<Item = (K, V)>) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v.as_ref().to_string()))
            })
            .collect();
        pairs.sort();
        self.overrides(pairs)
    }

    pub fn resolve(self) -> Result<RunConfig> {
        let cfg: RunConfig = self
            .value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scenario_config().validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.memory.heads == 0 || self.memory.dim % self.memory.heads != 0 {
            return Err(Error::Config(format!(
                "memory.dim {} is not divisible by memory.heads {}",
                self.memory.dim, self.memory.heads
            )));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be positive", self.train.lr)));
        }
        if !(0.0..1.0).contains(&self.train.cond_dropout) {
            return Err(Error::Config(format!(
                "train.cond_dropout {} outside [0, 1)",
                self.train.cond_dropout
            )));
        }
        if !self.sampler.guidance.is_finite() {
            return Err(Error::Config("sampler.guidance must be finite".into()));
        }
        if self.model.context_dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "model.context_dim {} must equal encoder.dim {}",
                self.model.context_dim, self.encoder.dim
            )));
        }
        if let Some(kind) = self.memory.kind.kind() {
            if self.baseline.kind == BaselineChoice::None {
                kind.check_scenario(self.scenario.kind)?;
            }
        }
        Ok(())
    }

    pub fn scenario_config(&self) -> PromptScenario {
        PromptScenario {
            kind: self.scenario.kind,
            p: self.scenario.p,
            placement: self.scenario.placement,
            retain_text: self.scenario.retain_text,
            seed: self.seed,
        }
    }

    pub fn memory_config(&self) -> Option<MemoryConfig> {
        self.memory.kind.kind().map(|kind| {
            let mut mc = MemoryConfig::new(kind, self.encoder.dim, self.encoder.dim)
                .with_dim(self.memory.dim, self.memory.heads);
            mc.retain_text = self.scenario.retain_text && kind == MemoryKind::Mmn;
            mc
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            denoiser: self.model,
            schedule: self.schedule,
            memory: self.memory_config(),
        }
    }

    pub fn control_config(&self) -> Option<ControlConfig> {
        let kind = match self.baseline.kind {
            BaselineChoice::None => return None,
            BaselineChoice::ControlnetText => ControlKind::ControlnetText,
            BaselineChoice::ControlnetImage => ControlKind::ControlnetImage,
        };
        let mut cc = ControlConfig::new(kind, self.model, self.schedule, self.encoder.dim);
        cc.tp = self.baseline.tp;
        cc.tp_width = self.baseline.tp_width;
        cc.memory_heads = self.memory.heads;
        Some(cc)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            max_steps: self.train.max_steps,
            seed: self.seed,
            cond_dropout: self.train.cond_dropout,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler.kind,
            stride: self.sampler.stride,
            seed: self.seed,
            clip: self.sampler.clip,
            guidance: self.sampler.guidance,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

/// SHA-256 over the given files in order, each prefixed by its length so
/// that concatenation boundaries matter.
pub fn content_hash(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
}

/// Writes `config.toml` and `provenance.json` into `dir`.
pub fn write_run_record(dir: &Path, command: &str, config: &RunConfig, inputs: &[PathBuf]) -> Result<Provenance> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let toml_path = dir.join("config.toml");
    fs::write(&toml_path, config.to_toml()?).map_err(|e| Error::io(&toml_path, e))?;
    let prov = Provenance {
        command: command.to_string(),
        config_hash: config.hash()?,
        input_hash: content_hash(inputs)?,
        inputs: inputs.to_vec(),
    };
    let path = dir.join("provenance.json");
    fs::write(&path, serde_json::to_string_pretty(&prov)?).map_err(|e| Error::io(&path, e))?;
    Ok(prov)
}

//! Checkpoint directories: `model.safetensors`, `optimizer.safetensors` and a
//! `state.json` sidecar with the step, seed, configs and tensor shapes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controlnet::ControlConfig;
use crate::diffusion::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::procedure::PromptScenario;

pub const MODEL_FILE: &str = "model.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "config", rename_all = "snake_case")]
pub enum ArchConfig {
    Diffusion(ModelConfig),
    Control(ControlConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub arch: ArchConfig,
    pub scenario: PromptScenario,
    pub train: TrainConfig,
    pub tensors: BTreeMap<String, Vec<usize>>,
}

pub fn shape_manifest(store: &ParamStore) -> BTreeMap<String, Vec<usize>> {
    store
        .named_vars()
        .into_iter()
        .map(|(name, var)| (name, var.as_tensor().dims().to_vec()))
        .collect()
}

pub fn checkpoint_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step-{step:07}"))
}

/// Writes the three files. `state.tensors` is filled from `store`.
pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    optimizer: Option<&Adam>,
    mut state: CheckpointState,
) -> Result<CheckpointState> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    store.save(&dir.join(MODEL_FILE))?;
    if let Some(opt) = optimizer {
        opt.save_state(&dir.join(OPTIMIZER_FILE))?;
    }
    state.tensors = shape_manifest(store);
    let path = dir.join(STATE_FILE);
    fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))?;
    Ok(state)
}

pub fn read_state(dir: &Path) -> Result<CheckpointState> {
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads weights (and optimizer moments when given) after checking that the
/// recorded architecture and every tensor shape match the live model.
pub fn load_checkpoint(
    dir: &Path,
    expected: &ArchConfig,
    store: &ParamStore,
    optimizer: Option<&mut Adam>,
) -> Result<CheckpointState> {
    let state = read_state(dir)?;
    if &state.arch != expected {
        return Err(Error::Config(format!(
            "checkpoint {} was written for {:?}, run is configured for {:?}",
            dir.display(),
            state.arch,
            expected
        )));
    }
    let live = shape_manifest(store);
    if live != state.tensors {
        let differing: Vec<&String> = live
            .keys()
            .chain(state.tensors.keys())
            .filter(|k| live.get(*k) != state.tensors.get(*k))
            .collect();
        return Err(Error::Config(format!(
            "checkpoint {} tensor manifest differs from the model at {differing:?}",
            dir.display()
        )));
    }
    store.load(&dir.join(MODEL_FILE))?;
    if let Some(opt) = optimizer {
        opt.load_state(&dir.join(OPTIMIZER_FILE))?;
    }
    Ok(state)
}

/// Newest `step-*` directory under `run_dir/checkpoints`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let root = run_dir.join("checkpoints");
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let path = entry.map_err(|e| Error::io(&root, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            if path.join(STATE_FILE).exists() && best.as_ref().map_or(true, |(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserConfig, ProceduralDiffusion, ScheduleConfig};
    use crate::nn::to_f64_vec;
    use candle_core::DType;

    fn tiny() -> ModelConfig {
        ModelConfig {
            denoiser: DenoiserConfig {
                image_size: 8,
                base_channels: 8,
                time_dim: 16,
                context_dim: 8,
                groups: 2,
            },
            schedule: ScheduleConfig::default(),
            memory: None,
        }
    }

    fn state(arch: ArchConfig) -> CheckpointState {
        CheckpointState {
            step: 3,
            seed: 1,
            config_hash: "abc".into(),
            arch,
            scenario: PromptScenario::text_only(),
            train: TrainConfig::default(),
            tensors: BTreeMap::new(),
        }
    }

    #[test]
    fn round_trip_restores_weights() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchConfig::Diffusion(tiny());
        let a = ProceduralDiffusion::new(tiny(), 1, DType::F32).unwrap();
        let written = save_checkpoint(dir.path(), &a.store, None, state(arch)).unwrap();
        let b = ProceduralDiffusion::new(tiny(), 2, DType::F32).unwrap();
        let read = load_checkpoint(dir.path(), &arch, &b.store, None).unwrap();
        assert_eq!(read, written);
        for ((_, va), (_, vb)) in a.store.named_vars().iter().zip(b.store.named_vars().iter()) {
            assert_eq!(to_f64_vec(va.as_tensor()).unwrap(), to_f64_vec(vb.as_tensor()).unwrap());
        }
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = ProceduralDiffusion::new(tiny(), 1, DType::F32).unwrap();
        save_checkpoint(dir.path(), &a.store, None, state(ArchConfig::Diffusion(tiny()))).unwrap();
        let mut other = tiny();
        other.denoiser.base_channels = 16;
        let b = ProceduralDiffusion::new(other, 1, DType::F32).unwrap();
        let e = load_checkpoint(dir.path(), &ArchConfig::Diffusion(other), &b.store, None).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn latest_picks_highest_step() {
        let dir = tempfile::tempdir().unwrap();
        let a = ProceduralDiffusion::new(tiny(), 1, DType::F32).unwrap();
        for step in [5, 40, 12] {
            let mut s = state(ArchConfig::Diffusion(tiny()));
            s.step = step;
            save_checkpoint(&checkpoint_dir(dir.path(), step), &a.store, None, s).unwrap();
        }
        let latest = latest_checkpoint(dir.path()).unwrap().unwrap();
        assert_eq!(read_state(&latest).unwrap().step, 40);
    }
}

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{conditioning_for, ImageEmbeddingCache, ProceduralDiffusion, RecipeConditioning};
use crate::encoder::{load_rgb, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::imaging::{crop_and_resize, image_to_tensor};
use crate::memory::MemoryKind;
use crate::optim::{Adam, AdamConfig};
use crate::procedure::{make_prompt_sequence, Manifest, PromptScenario, Split};
use crate::seed::rng_for;

/// One recipe ready for training: conditioning plus ground-truth keyframes.
#[derive(Debug, Clone)]
pub struct TrainingRecipe {
    pub conditioning: RecipeConditioning,
    /// `(N, 3, S, S)` in `[-1, 1]`.
    pub images: Tensor,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    recipes: Vec<TrainingRecipe>,
    /// `(recipe index, 0-based step)` for every training pair.
    pairs: Vec<(usize, usize)>,
}

impl TrainingSet {
    pub fn new(recipes: Vec<TrainingRecipe>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (r, recipe) in recipes.iter().enumerate() {
            let n = recipe.images.dim(0)?;
            if n != recipe.conditioning.len() {
                return Err(Error::Validation(format!(
                    "recipe {} has {n} images for {} prompts",
                    recipe.conditioning.recipe_id,
                    recipe.conditioning.len()
                )));
            }
            pairs.extend((0..n).map(|j| (r, j)));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(TrainingSet { recipes, pairs })
    }

    /// Recipes of `split` whose steps all carry a keyframe. Others are
    /// skipped with a warning.
    #[allow(clippy::too_many_arguments)]
    pub fn from_manifest(
        manifest: &Manifest,
        split: Split,
        scenario: &PromptScenario,
        provider: &dyn EmbeddingProvider,
        memory_kind: Option<MemoryKind>,
        image_size: u32,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut cache = ImageEmbeddingCache::default();
        let mut recipes = Vec::new();
        for recipe in manifest.split(split) {
            if recipe.steps.iter().any(|s| s.image_ref.is_none()) {
                log::warn!("skipping {}: not every step has a keyframe", recipe.recipe_id);
                continue;
            }
            let sequence = match make_prompt_sequence(recipe, scenario, &manifest.root) {
                Ok(s) => s,
                Err(e @ Error::Coverage { .. }) => {
                    log::warn!("skipping {}: {e}", recipe.recipe_id);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let conditioning = conditioning_for(&sequence, memory_kind, provider, &mut cache, dtype, device)?;
            let mut frames = Vec::with_capacity(recipe.len());
            for step in &recipe.steps {
                let path = manifest.image_path(step).expect("checked above");
                let img = crop_and_resize(&load_rgb(&path)?, image_size)?;
                frames.push(image_to_tensor(&img, dtype, device)?);
            }
            recipes.push(TrainingRecipe {
                conditioning,
                images: Tensor::stack(&frames, 0)?,
            });
        }
        Self::new(recipes)
    }

    pub fn recipes(&self) -> &[TrainingRecipe] {
        &self.recipes
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the run below `epochs` worth of steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Probability of training a pair on the null condition (zero context
    /// and memory rows), which guided sampling needs as its unconditional
    /// branch.
    #[serde(default)]
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            epochs: 75,
            batch_size: 8,
            max_steps: None,
            seed: 0,
            cond_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, pairs: usize) -> usize {
        pairs.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, pairs: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(pairs);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Batch of global step `k` (0-based): each epoch walks a seeded
/// permutation of all pairs, so any step can be reproduced after resume.
pub fn batch_indices(config: &TrainConfig, pairs: usize, k: usize) -> Vec<usize> {
    let b = config.batch_size.max(1);
    let spe = config.steps_per_epoch(pairs);
    let epoch = k / spe;
    let mut perm: Vec<usize> = (0..pairs).collect();
    perm.shuffle(&mut rng_for(config.seed, &format!("train/epoch/{epoch}")));
    let start = (k % spe) * b;
    perm[start..(start + b).min(pairs)].to_vec()
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Noise-prediction MSE over the given pairs. Memory rows come from one
/// memory-net pass per distinct recipe. Each pair is switched to the null
/// condition with probability `cond_dropout`; at zero no extra draws are made.
pub fn diffusion_loss(
    model: &ProceduralDiffusion,
    data: &TrainingSet,
    batch: &[usize],
    cond_dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (dtype, device) = (model.dtype(), model.device().clone());
    let mut x0 = Vec::with_capacity(batch.len());
    let mut ctx = Vec::with_capacity(batch.len());
    let mut mem = Vec::with_capacity(batch.len());
    let mut last: Option<(usize, Option<Tensor>)> = None;
    let mut sorted: Vec<(usize, usize)> = batch.iter().map(|&i| data.pairs[i]).collect();
    sorted.sort_unstable();
    for (r, j) in sorted {
        let recipe = &data.recipes[r];
        if last.as_ref().map(|(lr, _)| *lr) != Some(r) {
            let m = model
                .procedural_memory(recipe.conditioning.memory_input.as_ref())?
                .map(|m| m.vectors);
            last = Some((r, m));
        }
        x0.push(recipe.images.get(j)?);
        ctx.push(recipe.conditioning.text.get(j)?);
        if let Some((_, Some(m))) = &last {
            mem.push(m.get(j)?);
        }
    }
    let x0 = Tensor::stack(&x0, 0)?;
    let ctx = Tensor::stack(&ctx, 0)?.unsqueeze(1)?;
    let mem = if mem.is_empty() {
        None
    } else {
        Some(Tensor::stack(&mem, 0)?)
    };
    let t_max = model.schedule.timesteps();
    let ts: Vec<usize> = (0..x0.dim(0)?).map(|_| rng.random_range(1..=t_max)).collect();
    let noise = normal_tensor(rng, x0.dims(), dtype, &device)?;
    let x_t = model.schedule.q_sample_batch(&x0, &ts, &noise)?;
    let (ctx, mem) = if cond_dropout > 0.0 {
        let keep: Vec<f32> = (0..ts.len())
            .map(|_| f32::from(u8::from(rng.random::<f64>() >= cond_dropout)))
            .collect();
        let keep = Tensor::from_vec(keep, ts.len(), &device)?.to_dtype(dtype)?;
        let ctx = ctx.broadcast_mul(&keep.reshape((ts.len(), 1, 1))?)?;
        let mem = match mem {
            Some(m) => Some(m.broadcast_mul(&keep.reshape((ts.len(), 1))?)?),
            None => None,
        };
        (ctx, mem)
    } else {
        (ctx, mem)
    };
    let eps = model.predict_noise(&x_t, &ts, &ctx, mem.as_ref())?;
    Ok((eps - noise)?.sqr()?.mean_all()?)
}

/// Optimizer loop state shared by the diffusion model and the control
/// adapters.
pub struct Trainer {
    config: TrainConfig,
    optimizer: Adam,
    step: usize,
    losses: Vec<f64>,
}

impl Trainer {
    pub fn new(vars: Vec<(String, Var)>, config: TrainConfig) -> Result<Self> {
        if vars.is_empty() {
            return Err(Error::Config("nothing to train".into()));
        }
        Ok(Trainer {
            optimizer: Adam::new(vars, config.optimizer)?,
            config,
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.optimizer
    }

    /// Sets the step counter when resuming from a checkpoint.
    pub fn resume_at(&mut self, step: usize) {
        self.step = step;
    }

    /// Computes the loss of the next batch and applies one update. A
    /// non-finite loss leaves every parameter untouched.
    pub fn train_step(
        &mut self,
        pairs: usize,
        loss_fn: impl FnOnce(&[usize], &mut ChaCha8Rng) -> Result<Tensor>,
    ) -> Result<f64> {
        let batch = batch_indices(&self.config, pairs, self.step);
        let mut rng = rng_for(self.config.seed, &format!("train/step/{}", self.step));
        let loss = loss_fn(&batch, &mut rng)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value} at step {}", self.step)));
        }
        let grads = loss.backward()?;
        self.optimizer.step(&grads)?;
        self.step += 1;
        self.losses.push(value);
        Ok(value)
    }
}

/// Mean of the first and last `window` losses.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

/// Trainable parameters of the diffusion model: everything in its store.
pub fn model_vars(model: &ProceduralDiffusion) -> Vec<(String, Var)> {
    model.store.named_vars()
}

/// Runs `steps` updates of the diffusion objective. On a non-finite loss the
/// current parameters are written under `snapshot_dir` before the error is
/// returned.
pub fn train_diffusion(
    model: &ProceduralDiffusion,
    data: &TrainingSet,
    trainer: &mut Trainer,
    steps: usize,
    snapshot_dir: Option<&Path>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    let cond_dropout = trainer.config().cond_dropout;
    for _ in 0..steps {
        match trainer.train_step(data.pair_count(), |batch, rng| {
            diffusion_loss(model, data, batch, cond_dropout, rng)
        }) {
            Ok(loss) => on_step(trainer.step(), loss),
            Err(e @ Error::Numeric(_)) => {
                if let Some(dir) = snapshot_dir {
                    let path = snapshot_path(dir, trainer.step());
                    std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
                    model.save(&path)?;
                    log::error!("wrote diagnostic snapshot {}", path.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

pub fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("nonfinite-step{step}.safetensors"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserConfig, ModelConfig, ScheduleConfig};

    fn tiny() -> (ProceduralDiffusion, TrainingSet) {
        let cfg = ModelConfig {
            denoiser: DenoiserConfig {
                image_size: 8,
                base_channels: 4,
                time_dim: 16,
                context_dim: 6,
                groups: 2,
            },
            schedule: ScheduleConfig {
                timesteps: 20,
                ..ScheduleConfig::default()
            },
            memory: None,
        };
        let model = ProceduralDiffusion::new(cfg, 1, DType::F32).unwrap();
        let mut rng = rng_for(2, "tests/tiny-set");
        let recipe = TrainingRecipe {
            conditioning: RecipeConditioning {
                recipe_id: "r".into(),
                text: normal_tensor(&mut rng, &[3, 6], DType::F32, &Device::Cpu).unwrap(),
                memory_input: None,
            },
            images: normal_tensor(&mut rng, &[3, 3, 8, 8], DType::F32, &Device::Cpu).unwrap(),
        };
        (model, TrainingSet::new(vec![recipe]).unwrap())
    }

    #[test]
    fn dropout_that_keeps_everything_matches_no_dropout() {
        let (model, data) = tiny();
        let loss = |p: f64| {
            let mut rng = rng_for(5, "tests/dropout");
            diffusion_loss(&model, &data, &[0, 1, 2], p, &mut rng)
                .unwrap()
                .to_scalar::<f32>()
                .unwrap()
        };
        assert_eq!(loss(0.0), loss(1e-300));
        assert_ne!(loss(0.0), loss(1.0 - 1e-12));
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let cfg = TrainConfig {
            batch_size: 4,
            seed: 3,
            ..Default::default()
        };
        let pairs = 10;
        let mut seen: Vec<usize> = (0..cfg.steps_per_epoch(pairs))
            .flat_map(|k| batch_indices(&cfg, pairs, k))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(&cfg, pairs, 5), batch_indices(&cfg, pairs, 5));
        assert_ne!(batch_indices(&cfg, pairs, 0), batch_indices(&cfg, pairs, 3));
    }

    #[test]
    fn step_budget() {
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 75,
            ..Default::default()
        };
        assert_eq!(cfg.total_steps(30), 75 * 4);
        let capped = TrainConfig {
            max_steps: Some(10),
            ..cfg
        };
        assert_eq!(capped.total_steps(30), 10);
    }

    #[test]
    fn nonfinite_loss_aborts_without_update() {
        let w = Var::new(&[1.0f32], &Device::Cpu).unwrap();
        let mut trainer = Trainer::new(vec![("w".into(), w.clone())], TrainConfig::default()).unwrap();
        let err = trainer
            .train_step(1, |_, _| Ok((w.as_tensor() * f64::NAN)?.sum_all()?))
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(w.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0]);
        assert_eq!(trainer.step(), 0);
    }

    #[test]
    fn smoothing() {
        let l = [4.0, 2.0, 1.0, 1.0];
        assert_eq!(smoothed_endpoints(&l, 2), Some((3.0, 1.0)));
        assert_eq!(smoothed_endpoints(&[], 2), None);
    }
}

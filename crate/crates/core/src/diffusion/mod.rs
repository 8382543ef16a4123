//! Pixel-space denoising diffusion with the memory conditioning path.

pub mod denoiser;
pub mod edit;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use denoiser::{BackboneAdapter, DenoiserConfig, ToyBackbone, ToyDenoiser};
pub use edit::{apply_edits, manipulate_and_generate, StepEdit};
pub use model::{
    conditioning_for, predict_conditioned, ImageEmbeddingCache, ModelConfig, ProceduralDiffusion, RecipeConditioning,
};
pub use sample::{sample_procedure, sample_sequence, SamplerConfig, SamplerKind};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{TrainConfig, Trainer, TrainingRecipe, TrainingSet};

//! Procedural image generation: recipe data, memory networks that condition
//! a denoising diffusion model on the steps that came before, a control
//! branch baseline, and the evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod controlnet;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod imaging;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod procedure;
pub mod seed;

pub use error::{Error, Result};

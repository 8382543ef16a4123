use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance schedule of the forward process. Timesteps are 1-based:
/// `beta(1)` is the first noising step and `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    }

    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Validation("schedule needs at least one timestep".into()));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Validation("schedule needs at least one timestep".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Validation(format!("beta_{} = {b} outside (0, 1)", i + 1)));
            }
            if i > 0 && b < betas[i - 1] {
                return Err(Error::Validation(format!(
                    "betas must be non-decreasing; beta_{} < beta_{}",
                    i + 1,
                    i
                )));
            }
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Validation(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        if x0.shape() != noise.shape() {
            return Err(Error::Validation(format!(
                "noise shape {:?} differs from sample shape {:?}",
                noise.dims(),
                x0.dims()
            )));
        }
        let ab = self.alpha_bar(t);
        Ok(((x0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
    }

    /// Per-example timesteps along the leading axis.
    pub fn q_sample_batch(&self, x0: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
        if x0.dim(0)? != ts.len() {
            return Err(Error::Validation(format!(
                "{} timesteps for a batch of {}",
                ts.len(),
                x0.dim(0)?
            )));
        }
        if x0.shape() != noise.shape() {
            return Err(Error::Validation("noise shape differs from sample shape".into()));
        }
        for &t in ts {
            self.check(t)?;
        }
        let a = self.coefficients(ts, |t| self.alpha_bar(t).sqrt(), x0)?;
        let s = self.coefficients(ts, |t| (1.0 - self.alpha_bar(t)).sqrt(), x0)?;
        Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
    }

    fn coefficients(&self, ts: &[usize], f: impl Fn(usize) -> f64, like: &Tensor) -> Result<Tensor> {
        let mut shape = vec![ts.len()];
        shape.extend(std::iter::repeat(1).take(like.rank() - 1));
        let v: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
        Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
    }

    /// Estimate of `x_0` from `x_t` and a noise prediction.
    pub fn predict_x0(&self, x_t: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        Ok(((x_t - (eps * (1.0 - ab).sqrt())?)? * (1.0 / ab.sqrt()))?)
    }

    /// Ancestral step `x_t -> x_{t-1}` through the posterior mean given the
    /// predicted `x_0`. `noise` is only read when `t > 1`.
    pub fn ddpm_step(&self, x_t: &Tensor, t: usize, eps: &Tensor, noise: &Tensor, clip: bool) -> Result<Tensor> {
        let mut x0 = self.predict_x0(x_t, t, eps)?;
        if clip {
            x0 = x0.clamp(-1.0, 1.0)?;
        }
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = ((x0 * c0)? + (x_t * ct)?)?;
        if t == 1 {
            return Ok(mean);
        }
        Ok((mean + (noise * self.posterior_variance(t).sqrt())?)?)
    }

    /// Deterministic (eta = 0) jump from `t` to `t_prev < t`.
    pub fn ddim_step(&self, x_t: &Tensor, t: usize, t_prev: usize, eps: &Tensor, clip: bool) -> Result<Tensor> {
        let mut x0 = self.predict_x0(x_t, t, eps)?;
        if clip {
            x0 = x0.clamp(-1.0, 1.0)?;
        }
        let ab_prev = self.alpha_bar(t_prev);
        let eps = if clip {
            // Keep the direction consistent with the clipped estimate.
            let ab = self.alpha_bar(t);
            ((x_t - (&x0 * ab.sqrt())?)? * (1.0 / (1.0 - ab).sqrt()))?
        } else {
            eps.clone()
        };
        Ok(((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
    }

    /// Descending timesteps `T, T - stride, ...` down to the last value >= 1.
    pub fn strided_timesteps(&self, stride: usize) -> Vec<usize> {
        let stride = stride.max(1);
        let mut ts: Vec<usize> = (1..=self.timesteps()).rev().step_by(stride).collect();
        if ts.last() != Some(&1) && stride > 1 {
            ts.push(1);
        }
        ts
    }
}

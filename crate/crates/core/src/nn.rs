//! Parameter storage and the small set of layers the models are built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path names. Initial
//! values are drawn from a ChaCha stream derived from (store seed, name), so a
//! model's initialization depends only on the seed and never on construction
//! order or on candle's thread-local RNG.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{GroupNorm, Linear, Module, VarMap};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

pub struct ParamStore {
    varmap: VarMap,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            varmap: VarMap::new(),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
            frozen: false,
        }
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// All variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("param store poisoned");
        let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.as_tensor().elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.varmap.save(path)?;
        Ok(())
    }

    /// Overwrites every registered variable with the archive's value. Names
    /// missing from the archive are an error.
    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.named_vars() {
            let value = tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint {} lacks tensor `{name}`", path.display())))?;
            if value.dims() != var.as_tensor().dims() {
                return Err(Error::Config(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    value.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies values from `other` for every name present in both stores,
    /// with `rename` mapping this store's names to the source names.
    pub fn copy_from(&self, other: &ParamStore, rename: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let source: std::collections::HashMap<String, Var> = other.named_vars().into_iter().collect();
        let mut copied = 0;
        for (name, var) in self.named_vars() {
            if let Some(src) = rename(&name).and_then(|n| source.get(&n)) {
                var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Adds seeded `N(0, std^2)` noise to every variable under `prefix`. Used
    /// to move zero-initialized layers off their neutral point in probes.
    pub fn perturb(&self, prefix: &str, std: f64, seed: u64) -> Result<usize> {
        let mut touched = 0;
        for (name, var) in self.named_vars() {
            if !name.starts_with(prefix) {
                continue;
            }
            let mut rng = rng_for(seed, &format!("perturb/{name}"));
            let values: Vec<f64> = (0..var.as_tensor().elem_count())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            let noise = Tensor::from_vec(values, var.as_tensor().dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&(var.as_tensor() + noise)?)?;
            touched += 1;
        }
        Ok(touched)
    }

    fn get_or_init(&self, dims: &[usize], name: &str, init: Init) -> Result<Var> {
        let mut data = self.varmap.data().lock().expect("param store poisoned");
        if let Some(var) = data.get(name) {
            if var.as_tensor().dims() != dims {
                return Err(Error::Validation(format!(
                    "parameter `{name}` registered with shape {:?}, requested {:?}",
                    var.as_tensor().dims(),
                    dims
                )));
            }
            return Ok(var.clone());
        }
        let count: usize = dims.iter().product();
        let mut rng = rng_for(self.seed, name);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Uniform(bound) => (0..count).map(|_| rng.random_range(-bound..=bound)).collect(),
            Init::Normal(std) => (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect(),
        };
        let tensor = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        data.insert(name.to_string(), var.clone());
        Ok(var)
    }
}

/// A path into a [`ParamStore`]. Frozen paths hand out detached tensors, so
/// no gradient ever reaches them.
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
    frozen: bool,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: &str) -> Params<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Params {
            store: self.store,
            prefix,
            frozen: self.frozen,
        }
    }

    pub fn frozen(&self, frozen: bool) -> Params<'a> {
        Params { frozen, ..self.clone() }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn get(&self, dims: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.pp(name).prefix;
        let var = self.store.get_or_init(dims, &full, init)?;
        if self.frozen {
            Ok(var.as_tensor().detach())
        } else {
            Ok(var.as_tensor().clone())
        }
    }
}

/// Affine layer with the usual fan-in uniform initialization.
pub fn linear(p: &Params, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = p.get(&[out_dim, in_dim], "weight", Init::Uniform(bound))?;
    let b = p.get(&[out_dim], "bias", Init::Uniform(bound))?;
    Ok(Linear::new(w, Some(b)))
}

/// Affine layer whose weight and bias start at exactly zero.
pub fn linear_zero(p: &Params, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = p.get(&[out_dim, in_dim], "weight", Init::Zeros)?;
    let b = p.get(&[out_dim], "bias", Init::Zeros)?;
    Ok(Linear::new(w, Some(b)))
}

/// 2-D convolution as an explicit patch matrix times the flattened kernel.
/// Both forward and backward reduce to matrix products, which run several
/// times faster on CPU than the direct kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// `(C_out, C_in, K, K)`.
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let (o, _, k, _) = self.weight.dims4()?;
        let p = self.padding;
        let (h1, w1) = (h + 2 * p + 1 - k, w + 2 * p + 1 - k);
        let patches = if k == 1 && p == 0 {
            xs.reshape((b, c, h * w))?
        } else {
            let padded = xs.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut taps = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    taps.push(padded.narrow(2, dy, h1)?.narrow(3, dx, w1)?);
                }
            }
            // (B, C, K*K, H1, W1) flattens in the kernel's (C_in, K, K) order.
            Tensor::stack(&taps, 2)?.reshape((b, c * k * k, h1 * w1))?
        };
        let ys = self
            .weight
            .reshape((o, c * k * k))?
            .broadcast_matmul(&patches)?
            .reshape((b, o, h1, w1))?;
        let ys = if self.stride > 1 {
            let rows: Vec<u32> = (0..h1).step_by(self.stride).map(|i| i as u32).collect();
            let cols: Vec<u32> = (0..w1).step_by(self.stride).map(|i| i as u32).collect();
            let rows = Tensor::from_vec(rows.clone(), rows.len(), xs.device())?;
            let cols = Tensor::from_vec(cols.clone(), cols.len(), xs.device())?;
            ys.index_select(&rows, 2)?.index_select(&cols, 3)?
        } else {
            ys
        };
        ys.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)
    }
}

pub fn conv2d(p: &Params, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Result<Conv2d> {
    let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
    let w = p.get(&[out_ch, in_ch, kernel, kernel], "weight", Init::Uniform(bound))?;
    let b = p.get(&[out_ch], "bias", Init::Uniform(bound))?;
    Ok(Conv2d::new(w, b, stride, padding))
}

/// 1x1 convolution initialized to zero.
pub fn conv2d_zero(p: &Params, in_ch: usize, out_ch: usize) -> Result<Conv2d> {
    let w = p.get(&[out_ch, in_ch, 1, 1], "weight", Init::Zeros)?;
    let b = p.get(&[out_ch], "bias", Init::Zeros)?;
    Ok(Conv2d::new(w, b, 1, 0))
}

pub fn group_norm(p: &Params, groups: usize, channels: usize) -> Result<GroupNorm> {
    let w = p.get(&[channels], "weight", Init::Ones)?;
    let b = p.get(&[channels], "bias", Init::Zeros)?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
}

/// Layer norm over the last dimension built from primitive ops, so it runs
/// in any float dtype and backpropagates.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn layer_norm(p: &Params, dim: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        weight: p.get(&[dim], "weight", Init::Ones)?,
        bias: p.get(&[dim], "bias", Init::Zeros)?,
        eps: 1e-5,
    })
}

/// Two affine layers with a GELU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(p: &Params, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: linear(&p.pp("fc1"), in_dim, hidden)?,
            fc2: linear(&p.pp("fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.fc1.forward(xs)?)?;
        Ok(self.fc2.forward(&h)?)
    }
}

/// Tanh-approximated GELU from primitive ops. Candle's fused GELU
/// backpropagates with truncated constants; this one differentiates exactly.
pub fn gelu(xs: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((xs + (xs.powf(3.0)? * 0.044715)?)? * c)?;
    Ok(((xs * 0.5)? * (inner.tanh()? + 1.0)?)?)
}

/// Sinusoidal features of scalar positions: `[sin(x w_k), cos(x w_k)]` with
/// `w_k = 10000^(-k / (dim/2))`. Returns shape `(len, dim)`.
pub fn sinusoidal(positions: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &x in positions {
        let mut row = vec![0.0f64; dim];
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            row[k] = (x * freq).sin();
            row[half + k] = (x * freq).cos();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

/// Softmax over the last dimension from primitive ops, so it stays
/// differentiable. Entries equal to `-inf` receive exactly zero weight.
pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?;
    let e = xs.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Row-major values of a tensor as `f64`, whatever its dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

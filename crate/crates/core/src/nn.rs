//! Small neural-network toolkit on top of candle: a seeded parameter store with
//! named namespaces, the handful of layers the models need, and Adam.
//!
//! Parameters are created in a deterministic order from a ChaCha stream, so two
//! models built with the same seed are bitwise identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
    Identity,
}

/// Owns every parameter of a model, keyed by dotted path.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Restarts the initialization stream, so parameters created afterwards
    /// depend only on `seed` and their creation order.
    pub fn reseed(&self, seed: u64) {
        *self.rng.lock().unwrap() = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    /// Variables whose path starts with any of `prefixes`.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars_with_prefix(&[""])
    }

    /// Copies every tensor's current value, for bitwise before/after checks.
    pub fn snapshot(&self, prefixes: &[&str]) -> Result<BTreeMap<String, Vec<u8>>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars_with_prefix(prefixes) {
            let t = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            let bytes = t
                .to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_bits().to_le_bytes())
                .collect();
            out.insert(name, bytes);
        }
        Ok(out)
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.lock().unwrap().get(&name) {
            if v.dims() != shape {
                return Err(Error::Domain(format!(
                    "parameter {name} already exists with shape {:?}, requested {:?}",
                    v.dims(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().unwrap();
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
                Init::Normal(std) => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        z * std
                    })
                    .collect(),
                Init::Identity => {
                    if shape.len() != 2 || shape[0] != shape[1] {
                        return Err(Error::Domain(format!(
                            "identity init needs a square matrix, got {shape:?}"
                        )));
                    }
                    let k = shape[0];
                    (0..n)
                        .map(|i| if i / k == i % k { 1.0 } else { 0.0 })
                        .collect()
                }
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.lock().unwrap().insert(name, var);
        Ok(out)
    }

    /// Writes all parameters plus string metadata as a safetensors container.
    pub fn save(&self, path: &Path, metadata: BTreeMap<String, String>) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .all_vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        save_tensors(path, &tensors, metadata)
    }

    /// Loads values into existing parameters. Unknown or missing names are errors
    /// unless they fall under one of `skip_prefixes`.
    pub fn load(&self, path: &Path, skip_prefixes: &[&str]) -> Result<BTreeMap<String, String>> {
        let (tensors, meta) = load_tensors(path, &self.device)?;
        let vars = self.vars.lock().unwrap();
        for (name, var) in vars.iter() {
            if skip_prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let t = tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("{} lacks tensor {name}", path.display()))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?} != model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(meta)
    }
}

pub fn save_tensors(
    path: &Path,
    tensors: &[(String, Tensor)],
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    let mut raw: Vec<(String, (safetensors::Dtype, Vec<usize>, Vec<u8>))> = Vec::new();
    for (name, t) in tensors {
        let (dtype, bytes) = match t.dtype() {
            DType::F64 => (
                safetensors::Dtype::F64,
                t.flatten_all()?
                    .to_vec1::<f64>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect::<Vec<u8>>(),
            ),
            _ => (
                safetensors::Dtype::F32,
                t.to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect::<Vec<u8>>(),
            ),
        };
        raw.push((name.clone(), (dtype, t.dims().to_vec(), bytes)));
    }
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = raw
        .iter()
        .map(|(n, (d, s, b))| {
            safetensors::tensor::TensorView::new(*d, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let meta: std::collections::HashMap<String, String> = metadata.into_iter().collect();
    safetensors::serialize_to_file(views, Some(meta), path)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn load_tensors(
    path: &Path,
    device: &Device,
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .map(|m| m.into_iter().collect())
        .unwrap_or_default();
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let t = match view.dtype() {
            safetensors::Dtype::F64 => {
                let v: Vec<f64> = view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            safetensors::Dtype::F32 => {
                let v: Vec<f32> = view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: unsupported dtype {other:?}"
                )))
            }
        };
        out.insert(name, t);
    }
    Ok((out, meta))
}

/// A namespace inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }

    /// A constant that is not registered as a parameter. Drawn from the same
    /// seeded stream so construction stays deterministic.
    pub fn constant(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let name = format!("{}.__const", self.prefix);
        let t = self.store.create(name.clone(), shape, init)?;
        self.store.vars.lock().unwrap().remove(&name);
        Ok(t.detach())
    }

    pub fn linear(&self, in_dim: usize, out_dim: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = self.var("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        let bias = if bias {
            Some(self.var("bias", &[out_dim], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn conv2d(
        &self,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Conv2d> {
        let fan_in = in_c * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.var("weight", &[out_c, in_c, kernel, kernel], Init::Uniform(bound))?;
        let bias = self.var("bias", &[out_c], Init::Uniform(bound))?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn layer_norm(&self, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.var("weight", &[dim], Init::Ones)?,
            bias: self.var("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Channel-wise layer norm over NCHW maps.
pub fn channel_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Nearest-neighbour upsampling of an NCHW map by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}

/// Nearest-neighbour resampling of an NCHW map to `(h, w)`; source index is
/// `floor(i · H / h)`.
pub fn resample_nearest(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, sh, sw) = x.dims4()?;
    if (sh, sw) == (h, w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows: Vec<u32> = (0..h).map(|i| (i * sh / h) as u32).collect();
    let cols: Vec<u32> = (0..w).map(|j| (j * sw / w) as u32).collect();
    let x = x.contiguous()?.index_select(&Tensor::from_vec(rows, h, dev)?, 2)?;
    Ok(x.contiguous()?.index_select(&Tensor::from_vec(cols, w, dev)?, 3)?)
}

pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / factor, factor, w / factor, factor))?
        .mean(5)?
        .mean(3)?)
}

/// (B, C, H, W) -> (B, C·f², H/f, W/f).
pub fn space_to_channel(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / f, f, w / f, f))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * f * f, h / f, w / f))?)
}

/// (B, C·f², H, W) -> (B, C, H·f, W·f); inverse of [`space_to_channel`].
pub fn channel_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, cff, h, w) = x.dims4()?;
    let c = cff / (f * f);
    Ok(x.reshape((b, c, f, f, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, h * f, w * f))?)
}

/// Scaled dot-product attention over (B, heads, T, d) tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    Ok(softmax_last(&scores)?.matmul(v)?)
}

/// Additive causal mask of shape (q_len, kv_len) where queries sit at the end.
pub fn causal_mask(q_len: usize, kv_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let offset = kv_len - q_len;
    let v: Vec<f32> = (0..q_len)
        .flat_map(|i| {
            (0..kv_len).map(move |j| if j <= i + offset { 0.0 } else { f32::NEG_INFINITY })
        })
        .collect();
    Ok(Tensor::from_vec(v, (q_len, kv_len), device)?.to_dtype(dtype)?)
}

/// Scalar value of a 0-d or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

/// Rotary tables for a 2D grid: the first half of each head dimension rotates
/// with the row index, the second half with the column index.
#[derive(Debug, Clone)]
pub struct Rope2d {
    cos: Tensor,
    sin: Tensor,
}

impl Rope2d {
    pub fn new(h: usize, w: usize, head_dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        if head_dim % 4 != 0 {
            return Err(Error::Domain(format!(
                "2D rotary encoding needs head_dim divisible by 4, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let quarter = head_dim / 4;
        let mut cos = Vec::with_capacity(h * w * head_dim);
        let mut sin = Vec::with_capacity(h * w * head_dim);
        for r in 0..h {
            for c in 0..w {
                for j in 0..head_dim {
                    let pos = if j < half { r } else { c } as f64;
                    let i = (j % half) % quarter;
                    let theta = 10000f64.powf(-(2.0 * i as f64) / half as f64);
                    cos.push((pos * theta).cos());
                    sin.push((pos * theta).sin());
                }
            }
        }
        let cos = Tensor::from_vec(cos, (h * w, head_dim), device)?.to_dtype(dtype)?;
        let sin = Tensor::from_vec(sin, (h * w, head_dim), device)?.to_dtype(dtype)?;
        Ok(Self { cos, sin })
    }

    /// Applies the rotation to a (B, heads, T, head_dim) tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        let q = d / 4;
        let parts: Vec<Tensor> = (0..4).map(|i| x.narrow(D::Minus1, i * q, q)).collect::<candle_core::Result<_>>()?;
        let rotated = Tensor::cat(&[&parts[1].neg()?, &parts[0], &parts[3].neg()?, &parts[2]], D::Minus1)?;
        Ok((x.broadcast_mul(&self.cos)? + rotated.broadcast_mul(&self.sin)?)?)
    }
}

/// Fixed 2D sinusoidal position table of shape (h·w, dim).
pub fn sincos_2d(h: usize, w: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(h * w * dim);
    for r in 0..h {
        for c in 0..w {
            for j in 0..dim {
                let (pos, k) = if j < half { (r, j) } else { (c, j - half) };
                let freq = 10000f64.powf(-((k / 2 * 2) as f64) / half.max(1) as f64);
                let a = pos as f64 * freq;
                v.push(if k % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    Ok(Tensor::from_vec(v, (h * w, dim), device)?.to_dtype(dtype)?)
}

/// Cached keys and values of one attention layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map(|k| k.dim(2).unwrap_or(0)).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new(scope: Scope<'_>, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Domain(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            ln1: scope.pp("ln1").layer_norm(dim)?,
            qkv: scope.pp("qkv").linear(dim, 3 * dim, true)?,
            out: scope.pp("out").linear(dim, dim, true)?,
            ln2: scope.pp("ln2").layer_norm(dim)?,
            fc1: scope.pp("fc1").linear(dim, mlp_ratio * dim, true)?,
            fc2: scope.pp("fc2").linear(mlp_ratio * dim, dim, true)?,
            heads,
        })
    }

    /// `x`: (B, T, dim). With a cache, keys/values of earlier calls are
    /// prepended and the new ones appended.
    pub fn forward(
        &self,
        x: &Tensor,
        rope: Option<&Rope2d>,
        mask: Option<&Tensor>,
        cache: Option<&mut KvCache>,
    ) -> Result<Tensor> {
        let (b, t, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * dim, dim)?
                .reshape((b, t, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (mut q, mut k, mut v) = (split(0)?, split(1)?, split(2)?);
        if let Some(r) = rope {
            q = r.apply(&q)?;
            k = r.apply(&k)?;
        }
        if let Some(c) = cache {
            if let (Some(pk), Some(pv)) = (&c.k, &c.v) {
                k = Tensor::cat(&[pk, &k], 2)?;
                v = Tensor::cat(&[pv, &v], 2)?;
            }
            c.k = Some(k.clone());
            c.v = Some(v.clone());
        }
        let a = attention(&q, &k, &v, mask)?
            .transpose(1, 2)?
            .reshape((b, t, dim))?;
        let x = (x + self.out.forward(&a)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
    row_mask: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam(W) over an explicit variable list. Variables absent from the list are
/// never touched; a row mask restricts updates of a matrix to selected rows.
pub struct Adam {
    slots: Vec<Slot>,
    cfg: AdamConfig,
    step: usize,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| {
                Ok(Slot {
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                    var,
                    row_mask: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            slots,
            cfg,
            step: 0,
        })
    }

    /// Adds a variable whose updates are limited to rows where `rows[i]` is true.
    pub fn push_row_masked(&mut self, var: Var, rows: &[bool]) -> Result<()> {
        let dims = var.dims().to_vec();
        if dims.first() != Some(&rows.len()) {
            return Err(Error::Domain(format!(
                "row mask of length {} for tensor {:?}",
                rows.len(),
                dims
            )));
        }
        let mut shape = vec![1usize; dims.len()];
        shape[0] = rows.len();
        let mask: Vec<f32> = rows.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, shape, var.device())?.to_dtype(var.dtype())?;
        self.slots.push(Slot {
            m: var.zeros_like()?,
            v: var.zeros_like()?,
            var,
            row_mask: Some(mask),
        });
        Ok(())
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step_with(&grads)
    }

    pub fn step_with(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let mut gs: Vec<Option<Tensor>> = Vec::with_capacity(self.slots.len());
        let mut sq = 0.0;
        for slot in &self.slots {
            let g = match grads.get(slot.var.as_tensor()) {
                Some(g) => {
                    let g = match &slot.row_mask {
                        Some(m) => g.broadcast_mul(m)?,
                        None => g.clone(),
                    };
                    sq += scalar(&g.sqr()?.sum_all()?)?;
                    Some(g)
                }
                None => None,
            };
            gs.push(g);
        }
        if !sq.is_finite() {
            return Err(Error::Divergence("non-finite gradient norm".into()));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (slot, g) in self.slots.iter_mut().zip(gs) {
            let Some(g) = g else { continue };
            // Gradients may carry autograd history; keep none of it in state.
            let g = (g.detach() * scale)?;
            slot.m = ((&slot.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            slot.v = ((&slot.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let mhat = (&slot.m / bc1)?;
            let vhat = (&slot.v / bc2)?;
            let mut update = (mhat / (vhat.sqrt()? + c.eps)?)?;
            if c.weight_decay > 0.0 {
                let mut decay = (slot.var.as_tensor() * c.weight_decay)?;
                if let Some(m) = &slot.row_mask {
                    decay = decay.broadcast_mul(m)?;
                }
                update = (update + decay)?;
            }
            let next = (slot.var.as_tensor() - (update * c.lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let a = ParamStore::new(7, DType::F32);
        let b = ParamStore::new(7, DType::F32);
        a.root().pp("x").linear(4, 3, true).unwrap();
        b.root().pp("x").linear(4, 3, true).unwrap();
        assert_eq!(a.snapshot(&[""]).unwrap(), b.snapshot(&[""]).unwrap());
    }

    #[test]
    fn space_channel_round_trip() {
        let x = Tensor::arange(0f32, 2.0 * 3.0 * 4.0 * 8.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 4, 8))
            .unwrap();
        let y = space_to_channel(&x, 2).unwrap();
        assert_eq!(y.dims(), &[2, 12, 2, 4]);
        let z = channel_to_space(&y, 2).unwrap();
        let d = (x - z).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(scalar(&d).unwrap(), 0.0);
    }

    #[test]
    fn row_mask_freezes_rows() {
        let store = ParamStore::new(1, DType::F32);
        let w = store.root().var("w", &[3, 2], Init::Normal(1.0)).unwrap();
        let var = store.get("w").unwrap();
        let before = w.to_vec2::<f32>().unwrap();
        let mut opt = Adam::new(vec![], AdamConfig::default()).unwrap();
        opt.push_row_masked(var, &[false, true, false]).unwrap();
        let loss = w.sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        let after = w.to_vec2::<f32>().unwrap();
        assert_eq!(before[0], after[0]);
        assert_eq!(before[2], after[2]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn cached_attention_matches_full_pass() {
        let store = ParamStore::new(5, DType::F64);
        let blk = TransformerBlock::new(store.root(), 8, 2, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 5, 8), &Device::Cpu).unwrap();
        let mask = causal_mask(5, 5, DType::F64, &Device::Cpu).unwrap();
        let full = blk.forward(&x, None, Some(&mask), None).unwrap();
        let mut cache = KvCache::default();
        let mut steps = Vec::new();
        for i in 0..5 {
            let xi = x.narrow(1, i, 1).unwrap();
            steps.push(blk.forward(&xi, None, None, Some(&mut cache)).unwrap());
        }
        let inc = Tensor::cat(&steps, 1).unwrap();
        let d = scalar(&(full - inc).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn rope_preserves_norm() {
        let r = Rope2d::new(3, 4, 8, DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 2, 12, 8), &Device::Cpu).unwrap();
        let y = r.apply(&x).unwrap();
        let nx = scalar(&x.sqr().unwrap().sum_all().unwrap()).unwrap();
        let ny = scalar(&y.sqr().unwrap().sum_all().unwrap()).unwrap();
        assert!((nx - ny).abs() < 1e-9);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = Tensor::randn(0f32, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let y = avg_pool(&upsample_nearest(&x, 2).unwrap(), 2).unwrap();
        let d = scalar(&(x - y).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(d < 1e-6);
    }
}

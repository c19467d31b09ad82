//! Vector quantizers: vanilla VQ and SimVQ, straight-through gradients and
//! codebook-utilization accounting.
//!
//! A SimVQ codebook keeps a frozen random basis `B` (K×D) and learns a single
//! linear map `W` (D×D); the effective codes are `B·Wᵀ`, so every code moves
//! whenever `W` does.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::grid::{FeatureGrid, IndexGrid};
use crate::nn::{Init, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    Vanilla,
    Simvq,
}

impl QuantizerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            QuantizerKind::Vanilla => "vanilla",
            QuantizerKind::Simvq => "simvq",
        }
    }
}

impl std::str::FromStr for QuantizerKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "vq" => Ok(Self::Vanilla),
            "simvq" => Ok(Self::Simvq),
            other => domain(format!("unknown quantizer kind `{other}`")),
        }
    }
}

/// Commitment-loss weight used by the training code.
pub const COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct Codebook {
    kind: QuantizerKind,
    size: usize,
    dim: usize,
    /// Vanilla: the trainable table. SimVQ: the frozen basis.
    table: Tensor,
    proj: Option<Tensor>,
}

/// Snapshot of an effective code table, row-major K×D, in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTable {
    pub size: usize,
    pub dim: usize,
    pub codes: Vec<f64>,
}

impl CodeTable {
    pub fn new(size: usize, dim: usize, codes: Vec<f64>) -> Result<Self> {
        if size == 0 || dim == 0 {
            return domain("codebook must be non-empty");
        }
        if codes.len() != size * dim {
            return domain(format!(
                "code table {size}x{dim} needs {} values, got {}",
                size * dim,
                codes.len()
            ));
        }
        Ok(Self { size, dim, codes })
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.codes[k * self.dim..(k + 1) * self.dim]
    }
}

/// Index of the code closest to `v` in squared Euclidean distance; ties go to
/// the smallest index.
pub fn nearest_code(table: &CodeTable, v: &[f64]) -> Result<usize> {
    if v.len() != table.dim {
        return domain(format!(
            "vector has dim {}, codebook has dim {}",
            v.len(),
            table.dim
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return domain("non-finite input vector");
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for k in 0..table.size {
        let d: f64 = table
            .code(k)
            .iter()
            .zip(v)
            .map(|(c, x)| (c - x) * (c - x))
            .sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok(best)
}

/// Result of quantizing a feature grid, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub indices: IndexGrid,
    pub quantized: FeatureGrid,
    pub commitment_loss: f64,
    pub codebook_loss: f64,
}

/// Result of quantizing a batch of row vectors inside a training graph.
#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    pub indices: Vec<u32>,
    /// Selected codes (N, D); gradients flow to the codebook parameters.
    pub codes: Tensor,
    /// mean ‖z − sg(e)‖², gradients flow to the features.
    pub commitment_loss: Tensor,
    /// mean ‖sg(z) − e‖², gradients flow to the codebook.
    pub codebook_loss: Tensor,
}

impl Codebook {
    pub fn new(scope: Scope<'_>, kind: QuantizerKind, size: usize, dim: usize) -> Result<Self> {
        if size == 0 || dim == 0 {
            return domain("codebook must be non-empty");
        }
        let (table, proj) = match kind {
            QuantizerKind::Vanilla => (
                scope.var("table", &[size, dim], Init::Uniform(1.0 / size as f64))?,
                None,
            ),
            QuantizerKind::Simvq => {
                let base = scope.var("base", &[size, dim], Init::Normal((dim as f64).powf(-0.5)))?;
                let proj = scope.var("proj", &[dim, dim], Init::Uniform(1.0 / (dim as f64).sqrt()))?;
                (base, Some(proj))
            }
        };
        Ok(Self {
            kind,
            size,
            dim,
            table,
            proj,
        })
    }

    pub fn kind(&self) -> QuantizerKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Parameter names, relative to the codebook scope, that training may update.
    pub fn trainable_names(&self) -> &'static [&'static str] {
        match self.kind {
            QuantizerKind::Vanilla => &["table"],
            QuantizerKind::Simvq => &["proj"],
        }
    }

    /// Effective K×D code table. For SimVQ the basis is detached so no
    /// gradient can reach it.
    pub fn effective(&self) -> Result<Tensor> {
        match &self.proj {
            None => Ok(self.table.clone()),
            Some(w) => Ok(self.table.detach().matmul(&w.t()?)?),
        }
    }

    pub fn table(&self) -> Result<CodeTable> {
        let eff = self.effective()?.to_dtype(DType::F64)?;
        let codes = eff.flatten_all()?.to_vec1::<f64>()?;
        CodeTable::new(self.size, self.dim, codes)
    }

    pub fn nearest_code(&self, v: &[f64]) -> Result<usize> {
        nearest_code(&self.table()?, v)
    }

    /// Codes for the given ids as an (N, D) tensor.
    pub fn lookup(&self, indices: &[u32]) -> Result<Tensor> {
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= self.size) {
            return domain(format!("code id {bad} out of range 0..{}", self.size));
        }
        let dev = self.table.device();
        let ids = Tensor::from_vec(indices.to_vec(), indices.len(), dev)?;
        Ok(self.effective()?.index_select(&ids, 0)?)
    }

    /// Quantizes the rows of an (N, D) tensor.
    pub fn quantize_tensor(&self, z: &Tensor) -> Result<QuantizedTensor> {
        let (n, d) = z.dims2()?;
        if d != self.dim {
            return domain(format!(
                "features have dim {d}, codebook has dim {}",
                self.dim
            ));
        }
        let table = self.table()?;
        let values = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let indices = assign(&table, &values, n)?;
        let codes = self.lookup(&indices)?;
        let commitment_loss = (z - codes.detach())?.sqr()?.mean_all()?;
        let codebook_loss = (z.detach() - &codes)?.sqr()?.mean_all()?;
        Ok(QuantizedTensor {
            indices,
            codes,
            commitment_loss,
            codebook_loss,
        })
    }

    /// Per-position nearest code over a feature grid.
    pub fn quantize_grid(&self, features: &FeatureGrid) -> Result<QuantizeResult> {
        if features.dim != self.dim {
            return domain(format!(
                "features have dim {}, codebook has dim {}",
                features.dim, self.dim
            ));
        }
        let table = self.table()?;
        let values: Vec<f64> = features.data.iter().map(|&v| v as f64).collect();
        let n = features.h * features.w;
        let indices = assign(&table, &values, n)?;
        let mut quantized = Vec::with_capacity(values.len());
        for &k in &indices {
            quantized.extend(table.code(k as usize).iter().map(|&c| c as f32));
        }
        let sq: f64 = indices
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                table
                    .code(k as usize)
                    .iter()
                    .zip(&values[i * self.dim..(i + 1) * self.dim])
                    .map(|(c, x)| (c - x) * (c - x))
                    .sum::<f64>()
            })
            .sum();
        let mse = if values.is_empty() {
            0.0
        } else {
            sq / values.len() as f64
        };
        Ok(QuantizeResult {
            indices: IndexGrid::new(features.h, features.w, indices)?,
            quantized: FeatureGrid::new(features.h, features.w, self.dim, quantized)?,
            commitment_loss: mse,
            codebook_loss: mse,
        })
    }
}

fn assign(table: &CodeTable, values: &[f64], n: usize) -> Result<Vec<u32>> {
    (0..n)
        .map(|i| nearest_code(table, &values[i * table.dim..(i + 1) * table.dim]).map(|k| k as u32))
        .collect()
}

/// Straight-through estimator: the forward value is exactly `quantized` and the
/// gradient with respect to `features` is exactly the upstream gradient.
pub fn straight_through(features: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    if features.dims() != quantized.dims() {
        return domain(format!(
            "shape mismatch: features {:?}, quantized {:?}",
            features.dims(),
            quantized.dims()
        ));
    }
    // q + (z − sg(z)): the bracket is exactly zero in the forward pass.
    Ok((quantized.detach() + (features - features.detach())?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub histogram: Vec<u64>,
    pub utilization: f64,
}

/// Histogram of code usage across a stream of index sets.
pub fn utilization<'a, I>(results: I, k: usize) -> Result<UtilizationReport>
where
    I: IntoIterator<Item = &'a [u32]>,
{
    if k == 0 {
        return domain("codebook size must be positive");
    }
    let mut histogram = vec![0u64; k];
    for indices in results {
        for &i in indices {
            let Some(slot) = histogram.get_mut(i as usize) else {
                return domain(format!("code id {i} out of range 0..{k}"));
            };
            *slot += 1;
        }
    }
    let used = histogram.iter().filter(|&&c| c > 0).count();
    Ok(UtilizationReport {
        utilization: used as f64 / k as f64,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Adam, AdamConfig, ParamStore};
    use candle_core::Device;

    fn table(codes: &[&[f64]]) -> CodeTable {
        let dim = codes[0].len();
        CodeTable::new(codes.len(), dim, codes.concat()).unwrap()
    }

    #[test]
    fn nearest_code_examples() {
        let t = table(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(nearest_code(&t, &[1.0, 1.0]).unwrap(), 1);
        // 1.45 vs 0.05
        assert_eq!(nearest_code(&t, &[0.9, 0.8]).unwrap(), 1);
        let t = table(&[&[0.0, 0.0], &[2.0, 0.0]]);
        assert_eq!(nearest_code(&t, &[1.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn nearest_code_rejects_non_finite_and_wrong_dim() {
        let t = table(&[&[0.0, 0.0]]);
        assert!(nearest_code(&t, &[f64::NAN, 0.0]).is_err());
        assert!(nearest_code(&t, &[0.0]).is_err());
    }

    fn fixed_codebook(store: &ParamStore, codes: &[f32], k: usize, d: usize) -> Codebook {
        let cb = Codebook::new(store.root().pp("cb"), QuantizerKind::Vanilla, k, d).unwrap();
        let t = Tensor::from_vec(codes.to_vec(), (k, d), &Device::Cpu).unwrap();
        store.get("cb.table").unwrap().set(&t).unwrap();
        cb
    }

    #[test]
    fn quantize_grid_single_cell() {
        let store = ParamStore::new(0, DType::F32);
        let cb = fixed_codebook(&store, &[0.0, 1.0], 2, 1);
        let f = FeatureGrid::new(1, 1, 1, vec![0.4]).unwrap();
        let r = cb.quantize_grid(&f).unwrap();
        assert_eq!(r.indices.data, vec![0]);
        assert_eq!(r.quantized.data, vec![0.0]);
        assert!((r.commitment_loss - 0.16).abs() < 1e-7);
    }

    #[test]
    fn quantize_grid_exact_codes_and_histogram() {
        let store = ParamStore::new(0, DType::F32);
        let codes = [0.0f32, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let cb = fixed_codebook(&store, &codes, 4, 2);
        let exact = FeatureGrid::new(2, 2, 2, [1.0f32, 1.0].repeat(4)).unwrap();
        let r = cb.quantize_grid(&exact).unwrap();
        assert_eq!(r.indices.data, vec![3; 4]);
        assert_eq!(r.commitment_loss, 0.0);

        let f = FeatureGrid::new(2, 2, 2, vec![0.1, 0.1, 0.9, 0.2, 0.1, 0.8, 0.7, 0.9]).unwrap();
        let r = cb.quantize_grid(&f).unwrap();
        let rep = utilization([r.indices.data.as_slice()], 4).unwrap();
        assert_eq!(rep.histogram, vec![1, 1, 1, 1]);
        assert_eq!(rep.utilization, 1.0);
    }

    #[test]
    fn quantize_dim_mismatch() {
        let store = ParamStore::new(0, DType::F32);
        let cb = Codebook::new(store.root(), QuantizerKind::Simvq, 8, 4).unwrap();
        let f = FeatureGrid::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(cb.quantize_grid(&f).is_err());
    }

    #[test]
    fn utilization_examples() {
        let r = utilization([[0u32, 0, 0].as_slice()], 4).unwrap();
        assert_eq!(r.utilization, 0.25);
        let r = utilization([[0u32, 1].as_slice(), [2u32, 3].as_slice()], 4).unwrap();
        assert_eq!(r.utilization, 1.0);
        assert!(utilization([[4u32].as_slice()], 4).is_err());
    }

    #[test]
    fn straight_through_forward_and_gradient() {
        let dev = Device::Cpu;
        let z = candle_core::Var::new(&[0.1f64, 0.7, -0.3], &dev).unwrap();
        let q = Tensor::new(&[0.3f64, 0.5, 0.0], &dev).unwrap();
        let out = straight_through(z.as_tensor(), &q).unwrap();
        assert_eq!(out.to_vec1::<f64>().unwrap(), q.to_vec1::<f64>().unwrap());
        let g = out.sum_all().unwrap().backward().unwrap();
        let gz = g.get(z.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gz, vec![1.0, 1.0, 1.0]);
        assert!(straight_through(z.as_tensor(), &q.narrow(0, 0, 2).unwrap()).is_err());
    }

    #[test]
    fn simvq_basis_is_frozen_under_training() {
        let store = ParamStore::new(3, DType::F32);
        let cb = Codebook::new(store.root().pp("cb"), QuantizerKind::Simvq, 16, 4).unwrap();
        let base_before = store.snapshot(&["cb.base"]).unwrap();
        let eff_before = cb.table().unwrap();
        let vars = store
            .vars_with_prefix(&["cb.proj"])
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let mut opt = Adam::new(vars, AdamConfig::default()).unwrap();
        for step in 0..5 {
            let z = Tensor::randn(0f32, 1.0, (32, 4), &Device::Cpu).unwrap();
            let q = cb.quantize_tensor(&z).unwrap();
            let loss = (q.codebook_loss + (q.commitment_loss * 0.25).unwrap()).unwrap();
            opt.backward_step(&loss).unwrap();
            assert_eq!(store.snapshot(&["cb.base"]).unwrap(), base_before, "step {step}");
        }
        assert_ne!(cb.table().unwrap(), eff_before);
    }
}

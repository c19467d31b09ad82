//! Token-conditioned pixel-space diffusion decoder that reconstructs an image
//! at twice the tokenizer's source resolution.

mod unet;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use unet::{timestep_embedding, UNet};

use crate::dualvitok::{check_hash, DualTokenizer};
use crate::error::{domain, Error, Result};
use crate::grid::{Image, IndexGrid};
use crate::nn::{avg_pool, resample_nearest, scalar, upsample_nearest, Adam, AdamConfig, Init, ParamStore};

pub const UPSCALE: usize = 2;
pub const NS_UNET: &str = "unet";
pub const NS_NULL: &str = "null";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub width: usize,
    pub levels: usize,
    /// Pixel-grid cells per source pixel cell (the tokenizer's pixel downsample).
    pub pix_downsample: usize,
    pub code_dim: usize,
    pub upscale: usize,
}

/// Largest beta `with_steps` produces.
pub const MAX_BETA: f64 = 0.999;

impl DiffusionConfig {
    /// Linear schedule whose endpoints are the 1000-step reference values
    /// `1e-4 → 0.02` rescaled by `1000 / timesteps`, so the forward process
    /// still ends near pure noise. Very short schedules cap both endpoints at
    /// `MAX_BETA`.
    pub fn with_steps(timesteps: usize, width: usize, pix_downsample: usize, code_dim: usize) -> Self {
        let scale = 1000.0 / timesteps.max(1) as f64;
        Self {
            timesteps,
            beta_start: (1e-4 * scale).min(MAX_BETA),
            beta_end: (0.02 * scale).min(MAX_BETA),
            width,
            levels: 3,
            pix_downsample,
            code_dim,
            upscale: UPSCALE,
        }
    }

    pub fn desk(pix_downsample: usize, code_dim: usize) -> Self {
        Self::with_steps(50, 64, pix_downsample, code_dim)
    }

    pub fn toy(pix_downsample: usize, code_dim: usize) -> Self {
        Self::with_steps(50, 16, pix_downsample, code_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.upscale != UPSCALE {
            return domain(format!("upscale factor is fixed at {UPSCALE}"));
        }
        if self.timesteps == 0 || self.levels == 0 || self.width == 0 {
            return domain("timesteps, levels and width must be positive");
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return domain(format!(
                "betas must satisfy 0 < {} <= {} < 1",
                self.beta_start, self.beta_end
            ));
        }
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        let n = self.timesteps;
        (0..n)
            .map(|i| {
                if n == 1 {
                    self.beta_start
                } else {
                    self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    /// Cumulative products of `1 − β`.
    pub fn alpha_bars(&self) -> Vec<f64> {
        let mut acc = 1.0;
        self.betas()
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondMaskSpec {
    pub sample_perturb_prob: f64,
    pub token_replace_prob: f64,
    pub sem_mask_prob: f64,
    pub pix_mask_prob: f64,
}

impl Default for CondMaskSpec {
    fn default() -> Self {
        Self {
            sample_perturb_prob: 0.5,
            token_replace_prob: 0.1,
            sem_mask_prob: 0.1,
            pix_mask_prob: 0.5,
        }
    }
}

impl CondMaskSpec {
    pub fn zero() -> Self {
        Self {
            sample_perturb_prob: 0.0,
            token_replace_prob: 0.0,
            sem_mask_prob: 0.0,
            pix_mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("sample_perturb_prob", self.sample_perturb_prob),
            ("token_replace_prob", self.token_replace_prob),
            ("sem_mask_prob", self.sem_mask_prob),
            ("pix_mask_prob", self.pix_mask_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return domain(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

/// Token grids of one source image plus null-embedding switches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub sem: IndexGrid,
    pub pix: IndexGrid,
    pub sem_null: bool,
    pub pix_null: bool,
}

impl Condition {
    pub fn new(sem: IndexGrid, pix: IndexGrid) -> Self {
        Self {
            sem,
            pix,
            sem_null: false,
            pix_null: false,
        }
    }
}

/// Result of [`mask_condition`] with the per-sample decisions exposed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedCondition {
    pub cond: Condition,
    pub perturbed: bool,
}

/// Training-time conditioning perturbation: token replacement on a fraction of
/// samples, then independent nulling of each branch.
pub fn mask_condition<R: Rng + ?Sized>(
    cond: &Condition,
    spec: &CondMaskSpec,
    sem_codes: usize,
    pix_codes: usize,
    rng: &mut R,
) -> MaskedCondition {
    let mut out = cond.clone();
    let perturbed = rng.random_bool(spec.sample_perturb_prob);
    if perturbed {
        for (grid, k) in [(&mut out.sem, sem_codes), (&mut out.pix, pix_codes)] {
            for id in grid.data.iter_mut() {
                if rng.random_bool(spec.token_replace_prob) {
                    *id = rng.random_range(0..k as u32);
                }
            }
        }
    }
    out.sem_null |= rng.random_bool(spec.sem_mask_prob);
    out.pix_null |= rng.random_bool(spec.pix_mask_prob);
    MaskedCondition {
        cond: out,
        perturbed,
    }
}

/// Replaces a fraction of tokens in both grids uniformly at random.
pub fn corrupt_tokens<R: Rng + ?Sized>(
    cond: &Condition,
    fraction: f64,
    sem_codes: usize,
    pix_codes: usize,
    rng: &mut R,
) -> Condition {
    let spec = CondMaskSpec {
        sample_perturb_prob: 1.0,
        token_replace_prob: fraction,
        sem_mask_prob: 0.0,
        pix_mask_prob: 0.0,
    };
    mask_condition(cond, &spec, sem_codes, pix_codes, rng).cond
}

pub struct DiffusionDecoder {
    cfg: DiffusionConfig,
    store: ParamStore,
    unet: UNet,
    null_sem: Tensor,
    null_pix: Tensor,
    sem_table: Tensor,
    pix_table: Tensor,
    alpha_bars: Vec<f64>,
    betas: Vec<f64>,
}

impl DiffusionDecoder {
    /// Builds a decoder conditioned on `tok`'s codebooks; the tables are
    /// copied and never trained.
    pub fn new(cfg: DiffusionConfig, tok: &DualTokenizer, seed: u64) -> Result<Self> {
        let tc = tok.config();
        let (Some(sem), Some(pix)) = (tok.sem_codebook(), tok.pix_codebook()) else {
            return domain("diffusion conditioning needs a dual-branch tokenizer");
        };
        Self::from_tables(cfg, sem.effective()?.detach(), pix.effective()?.detach(), tc.pix_downsample, seed)
    }

    pub fn from_tables(
        cfg: DiffusionConfig,
        sem_table: Tensor,
        pix_table: Tensor,
        pix_downsample: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.pix_downsample != pix_downsample {
            return domain(format!(
                "diffusion config expects pixel downsample {}, tokenizer has {pix_downsample}",
                cfg.pix_downsample
            ));
        }
        let d = cfg.code_dim;
        if sem_table.dim(1)? != d || pix_table.dim(1)? != d {
            return domain(format!("codebook dim differs from configured {d}"));
        }
        let store = ParamStore::new(seed, DType::F32);
        let root = store.root();
        let unet = UNet::new(root.pp(NS_UNET), 3 + 2 * d, cfg.width, cfg.levels)?;
        let null_sem = root.pp(NS_NULL).var("sem", &[d], Init::Normal(0.1))?;
        let null_pix = root.pp(NS_NULL).var("pix", &[d], Init::Normal(0.1))?;
        Ok(Self {
            alpha_bars: cfg.alpha_bars(),
            betas: cfg.betas(),
            cfg,
            store,
            unet,
            null_sem,
            null_pix,
            sem_table: sem_table.to_dtype(DType::F32)?.detach(),
            pix_table: pix_table.to_dtype(DType::F32)?.detach(),
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Semantic and pixel code tables the conditions are looked up in.
    pub fn code_tables(&self) -> (&Tensor, &Tensor) {
        (&self.sem_table, &self.pix_table)
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    fn codes(&self, table: &Tensor, null: &Tensor, grid: &IndexGrid, nulled: bool) -> Result<Tensor> {
        let d = self.cfg.code_dim;
        let map = if nulled {
            null.reshape((1, d, 1, 1))?
                .broadcast_as((1, d, grid.h, grid.w))?
                .contiguous()?
        } else {
            let k = table.dim(0)?;
            if let Some(&bad) = grid.data.iter().find(|&&i| i as usize >= k) {
                return domain(format!("code id {bad} out of range 0..{k}"));
            }
            let ids = Tensor::from_vec(grid.data.clone(), grid.len(), self.device())?;
            table
                .index_select(&ids, 0)?
                .reshape((1, grid.h, grid.w, d))?
                .permute((0, 3, 1, 2))?
        };
        Ok(map)
    }

    /// Channel-concatenated code map at pixel-grid resolution, (1, 2D, ph, pw).
    pub fn cond_features(&self, cond: &Condition) -> Result<Tensor> {
        let (s, p) = (&cond.sem, &cond.pix);
        if s.h == 0 || s.w == 0 || p.h % s.h != 0 || p.w % s.w != 0 || p.h / s.h != p.w / s.w {
            return domain(format!(
                "semantic grid {}x{} and pixel grid {}x{} do not describe one image",
                s.h, s.w, p.h, p.w
            ));
        }
        let sem = self.codes(&self.sem_table, &self.null_sem, s, cond.sem_null)?;
        let pix = self.codes(&self.pix_table, &self.null_pix, p, cond.pix_null)?;
        let sem = resample_nearest(&sem, p.h, p.w)?;
        Ok(Tensor::cat(&[&sem, &pix], 1)?)
    }

    /// Conditioning map at the output resolution, (1, 2D, 2H, 2W).
    pub fn cond_embed(&self, cond: &Condition) -> Result<Tensor> {
        let f = self.cond_features(cond)?;
        upsample_nearest(&f, self.cfg.pix_downsample * self.cfg.upscale)
    }

    /// Output size for a condition, `(height, width)`.
    pub fn output_dims(&self, cond: &Condition) -> (usize, usize) {
        let f = self.cfg.pix_downsample * self.cfg.upscale;
        (cond.pix.h * f, cond.pix.w * f)
    }

    fn batch_cond(&self, conds: &[Condition]) -> Result<Tensor> {
        let maps = conds.iter().map(|c| self.cond_embed(c)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&maps, 0)?)
    }

    fn gaussian(&self, shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, shape, self.device())?)
    }

    /// Noise-prediction loss graph for targets in `[0, 1]`, (B, 3, 2H, 2W).
    pub fn loss(&self, targets: &Tensor, conds: &[Condition], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let (b, c, h, w) = targets.dims4()?;
        if conds.len() != b {
            return domain(format!("{b} targets but {} conditions", conds.len()));
        }
        if let Some(cond) = conds.iter().find(|c| self.output_dims(c) != (h, w)) {
            return domain(format!(
                "target is {h}x{w} but tokens imply {:?}",
                self.output_dims(cond)
            ));
        }
        let x0 = ((targets * 2.0)? - 1.0)?;
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.cfg.timesteps)).collect();
        let noise = self.gaussian((b, c, h, w), rng)?;
        let (sa, sb): (Vec<f32>, Vec<f32>) = ts
            .iter()
            .map(|&t| (self.alpha_bars[t].sqrt() as f32, (1.0 - self.alpha_bars[t]).sqrt() as f32))
            .unzip();
        let sa = Tensor::from_vec(sa, (b, 1, 1, 1), self.device())?;
        let sb = Tensor::from_vec(sb, (b, 1, 1, 1), self.device())?;
        let xt = (x0.broadcast_mul(&sa)? + noise.broadcast_mul(&sb)?)?;
        let input = Tensor::cat(&[&xt, &self.batch_cond(conds)?], 1)?;
        let pred = self.unet.forward(&input, &ts)?;
        Ok((pred - noise)?.sqr()?.mean_all()?)
    }

    /// Ancestral sampling from pure noise; returns an image in `[0, 1]` at
    /// twice the token source resolution.
    pub fn sample(&self, cond: &Condition, seed: u64) -> Result<Image> {
        let cmap = self.cond_embed(cond)?;
        let (h, w) = self.output_dims(cond);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = self.gaussian((1, 3, h, w), &mut rng)?;
        for t in (0..self.cfg.timesteps).rev() {
            let input = Tensor::cat(&[&x, &cmap], 1)?;
            let eps = self.unet.forward(&input, &[t])?;
            let beta = self.betas[t];
            let ab = self.alpha_bars[t];
            let mean = ((&x - (eps * (beta / (1.0 - ab).sqrt()))?)? / (1.0 - beta).sqrt())?;
            x = if t > 0 {
                let prev = self.alpha_bars[t - 1];
                let var = beta * (1.0 - prev) / (1.0 - ab);
                (mean + (self.gaussian((1, 3, h, w), &mut rng)? * var.sqrt())?)?
            } else {
                mean
            };
        }
        let img = ((x.clamp(-1.0, 1.0)? + 1.0)? / 2.0)?;
        Ok(Image::batch_from_tensor(&img)?.remove(0))
    }

    pub fn config_hash(&self) -> String {
        crate::harness::config::structural_hash(&self.cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "diffusion".into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("config_hash".into(), self.config_hash());
        self.store.save(path, meta)
    }

    pub fn load(&self, path: &Path, allow_mismatch: bool) -> Result<()> {
        let (_, meta) = crate::nn::load_tensors(path, self.device())?;
        check_hash(&meta, &self.config_hash(), allow_mismatch, path)?;
        self.store.load(path, &[])?;
        Ok(())
    }

    pub fn config_from_checkpoint(path: &Path) -> Result<DiffusionConfig> {
        let (_, meta) = crate::nn::load_tensors(path, &Device::Cpu)?;
        let raw = meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint(format!("{} has no config", path.display())))?;
        Ok(serde_json::from_str(raw)?)
    }
}

/// Tokenizes low-resolution sources for a batch of high-resolution targets.
pub fn source_conditions(tok: &DualTokenizer, targets: &[Image]) -> Result<Vec<Condition>> {
    let x = tok.images_to_tensor(targets)?;
    let low = avg_pool(&x, UPSCALE)?;
    let sources = Image::batch_from_tensor(&low)?;
    tok.encode_batch(&sources)?
        .into_iter()
        .map(|o| Ok(Condition::new(o.sem()?.indices.clone(), o.pix()?.indices.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mask: CondMaskSpec,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
            mask: CondMaskSpec::default(),
        }
    }
}

pub struct DiffusionTrainer {
    pub model: DiffusionDecoder,
    cfg: DiffusionTrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl DiffusionTrainer {
    pub fn new(model: DiffusionDecoder, cfg: DiffusionTrainConfig) -> Result<Self> {
        cfg.mask.validate()?;
        let vars = model.store.all_vars().into_iter().map(|(_, v)| v).collect();
        let opt = Adam::new(
            vars,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        )?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            opt,
        })
    }

    pub fn steps(&self) -> usize {
        self.opt.steps()
    }

    /// One step on pre-tokenized conditions; returns the loss.
    pub fn train_step(&mut self, targets: &[Image], conds: &[Condition]) -> Result<f64> {
        let sk = self.model.sem_table.dim(0)?;
        let pk = self.model.pix_table.dim(0)?;
        let masked: Vec<Condition> = conds
            .iter()
            .map(|c| mask_condition(c, &self.cfg.mask, sk, pk, &mut self.rng).cond)
            .collect();
        let x = Image::batch_to_tensor(targets, DType::F32, self.model.device())?;
        let loss = self.model.loss(&x, &masked, &mut self.rng)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("non-finite diffusion loss at step {}", self.opt.steps())));
        }
        self.opt.backward_step(&loss)?;
        Ok(value)
    }
}

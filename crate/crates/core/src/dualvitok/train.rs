use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{inject_noise_batch, BranchBatch, DualTokenizer, NoiseSpec};
use crate::error::{domain, Error, Result};
use crate::grid::Image;
use crate::harness::metrics::{psnr, ssim};
use crate::nn::{scalar, Adam, AdamConfig};
use crate::vq::{straight_through, utilization, Codebook, COMMITMENT_WEIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cosine: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub gan: f64,
    /// Fraction of training after which the adversarial terms switch on.
    pub gan_start: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cosine: 1.0,
            l1: 1.0,
            perceptual: 0.5,
            gan: 0.1,
            gan_start: 2.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cosine_sem: f64,
    pub l1_pix: f64,
    pub perceptual: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    /// Codebook plus weighted commitment terms of all quantizers.
    pub vq: f64,
    pub total: f64,
}

impl LossReport {
    /// The weighted sum `total` is defined as.
    pub fn combine(&self, w: &LossWeights) -> f64 {
        w.cosine * self.cosine_sem + w.l1 * self.l1_pix + w.perceptual * self.perceptual + w.gan * self.gan_g + self.vq
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    /// Which token grids the noise perturbs; by default only the pixel grid.
    pub noise_sem: bool,
    pub noise_pix: bool,
    pub gan: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
            noise: NoiseSpec::default(),
            noise_sem: false,
            noise_pix: true,
            gan: true,
            weights: LossWeights::default(),
        }
    }
}

/// Mean over positions of `1 − cos(a, b)` for (…, D) tensors; positions where
/// either vector has zero norm count as cosine 0. Returns the loss and the
/// number of such positions.
pub fn semantic_loss(recon: &Tensor, target: &Tensor) -> Result<(Tensor, usize)> {
    if recon.dims() != target.dims() {
        return domain(format!(
            "feature shapes differ: {:?} vs {:?}",
            recon.dims(),
            target.dims()
        ));
    }
    let dot = (recon * target)?.sum(D::Minus1)?;
    let na = recon.sqr()?.sum(D::Minus1)?;
    let nb = target.sqr()?.sum(D::Minus1)?;
    let prod = (na * nb)?;
    let zero = prod.eq(0.0)?;
    let zero_count = zero.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()? as usize;
    // Zero-norm rows have dot = 0, so any positive denominator yields cosine 0.
    let denom = zero.where_cond(&prod.ones_like()?, &prod)?.sqrt()?;
    let cos = (dot / denom)?;
    Ok(((1.0 - cos)?.mean_all()?, zero_count))
}

struct Losses {
    cosine: Option<Tensor>,
    l1: Tensor,
    perceptual: Tensor,
    gan_g: Option<Tensor>,
    vq: Tensor,
    recon: Tensor,
}

/// Switches for building the loss graph.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GraphOptions<'a> {
    pub noise: Option<(&'a NoiseSpec, bool, bool)>,
    pub gan: bool,
    /// Feed continuous features straight to the decoders.
    pub bypass_quantizer: bool,
}

impl DualTokenizer {
    fn branch_codes(
        &self,
        bb: &BranchBatch,
        cb: &Codebook,
        noise: Option<&NoiseSpec>,
        rng: &mut ChaCha8Rng,
        bypass: bool,
    ) -> Result<Tensor> {
        if bypass {
            return Ok(bb.z.clone());
        }
        let codes = match noise {
            Some(spec) => {
                let per = bb.grid.0 * bb.grid.1;
                let noisy = inject_noise_batch(&bb.q.indices, per, spec, cb.size(), rng);
                cb.lookup(&noisy)?
            }
            None => bb.q.codes.clone(),
        };
        straight_through(&bb.z, &codes)
    }

    fn to_map(&self, codes: &Tensor, b: usize, grid: (usize, usize)) -> Result<Tensor> {
        Ok(codes
            .reshape((b, grid.0, grid.1, self.cfg.code_dim))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    fn losses(&self, x: &Tensor, opts: GraphOptions<'_>, rng: &mut ChaCha8Rng) -> Result<Losses> {
        let enc = self.encode_tensor(x)?;
        let b = enc.batch;
        let noise_for = |sem: bool| {
            opts.noise
                .and_then(|(spec, s, p)| if (sem && s) || (!sem && p) { Some(spec) } else { None })
        };
        let mut vq = x.zeros_like()?.sum_all()?;
        let mut sem_codes = None;
        let mut pix_codes = None;
        if let (Some(bb), Some(cb)) = (&enc.sem, &self.sem_codebook) {
            sem_codes = Some(self.branch_codes(bb, cb, noise_for(true), rng, opts.bypass_quantizer)?);
            if !opts.bypass_quantizer {
                vq = (vq + (&bb.q.codebook_loss + (&bb.q.commitment_loss * COMMITMENT_WEIGHT)?)?)?;
            }
        }
        if let (Some(bb), Some(cb)) = (&enc.pix, &self.pix_codebook) {
            pix_codes = Some(self.branch_codes(bb, cb, noise_for(false), rng, opts.bypass_quantizer)?);
            if !opts.bypass_quantizer {
                vq = (vq + (&bb.q.codebook_loss + (&bb.q.commitment_loss * COMMITMENT_WEIGHT)?)?)?;
            }
        }
        let target = enc.backbone.features.detach();
        let cosine = match self.reconstruct_semantic(&enc, sem_codes.as_ref(), pix_codes.as_ref())? {
            Some(rec) => Some(semantic_loss(&rec, &target)?.0),
            None => None,
        };
        let (_, _, h, w) = x.dims4()?;
        let ((sh, sw), (ph, pw)) = self.cfg.grid_dims(h, w)?;
        let sem_map = sem_codes.as_ref().map(|c| self.to_map(c, b, (sh, sw))).transpose()?;
        let pix_map = pix_codes.as_ref().map(|c| self.to_map(c, b, (ph, pw))).transpose()?;
        let input = self.decoder_input(sem_map.as_ref(), pix_map.as_ref(), (ph, pw))?;
        let recon = self.decoder().forward(&input)?;
        let l1 = (&recon - x)?.abs()?.mean_all()?;
        let fake = self.backbone().forward(&recon)?;
        let mut perceptual = x.zeros_like()?.sum_all()?;
        let n = enc.backbone.intermediates.len().max(1) as f64;
        for (f, r) in fake.intermediates.iter().zip(&enc.backbone.intermediates) {
            perceptual = (perceptual + ((f - r.detach())?.sqr()?.mean_all()? / n)?)?;
        }
        let gan_g = if opts.gan {
            Some((1.0 - self.discriminator().forward(&recon)?)?.relu()?.mean_all()?)
        } else {
            None
        };
        Ok(Losses {
            cosine,
            l1,
            perceptual,
            gan_g,
            vq,
            recon,
        })
    }

    /// Total loss graph without noise or adversarial terms; with
    /// `bypass_quantizer` the decoders see continuous features.
    pub fn total_loss(&self, x: &Tensor, weights: &LossWeights, bypass_quantizer: bool) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = self.losses(
            x,
            GraphOptions {
                noise: None,
                gan: false,
                bypass_quantizer,
            },
            &mut rng,
        )?;
        let mut total = ((&l.l1 * weights.l1)? + (&l.perceptual * weights.perceptual)?)?;
        if let Some(c) = &l.cosine {
            total = (total + (c * weights.cosine)?)?;
        }
        Ok((total + l.vq)?)
    }
}

/// Owns a tokenizer together with its optimizers and noise stream.
pub struct TokenizerTrainer {
    pub tok: DualTokenizer,
    cfg: TrainConfig,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl TokenizerTrainer {
    pub fn new(tok: DualTokenizer, cfg: TrainConfig) -> Result<Self> {
        cfg.noise.validate()?;
        if cfg.batch_size == 0 {
            return domain("batch size must be at least 1");
        }
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let names = tok.generator_param_names();
        let gen_vars = names
            .iter()
            .filter_map(|n| tok.store().get(n))
            .collect::<Vec<_>>();
        let disc_vars = tok
            .store()
            .vars_with_prefix(&[super::NS_DISCRIMINATOR])
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        Ok(Self {
            opt_g: Adam::new(gen_vars, adam)?,
            opt_d: Adam::new(disc_vars, adam)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            tok,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Restores the step counter after loading weights from a checkpoint.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn gan_active(&self) -> bool {
        self.cfg.gan && (self.step as f64) >= self.cfg.weights.gan_start * self.cfg.steps as f64
    }

    pub fn train_step(&mut self, images: &[Image]) -> Result<LossReport> {
        let x = self.tok.images_to_tensor(images)?;
        let gan = self.gan_active();
        let w = self.cfg.weights;
        let spec = self.cfg.noise;
        let l = self.tok.losses(
            &x,
            GraphOptions {
                noise: Some((&spec, self.cfg.noise_sem, self.cfg.noise_pix)),
                gan,
                bypass_quantizer: false,
            },
            &mut self.rng,
        )?;
        let mut total = ((&l.l1 * w.l1)? + (&l.perceptual * w.perceptual)?)?;
        if let Some(c) = &l.cosine {
            total = (total + (c * w.cosine)?)?;
        }
        if let Some(g) = &l.gan_g {
            total = (total + (g * w.gan)?)?;
        }
        total = (total + &l.vq)?;
        let mut report = LossReport {
            cosine_sem: l.cosine.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            l1_pix: scalar(&l.l1)?,
            perceptual: scalar(&l.perceptual)?,
            gan_g: l.gan_g.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            gan_d: 0.0,
            vq: scalar(&l.vq)?,
            total: scalar(&total)?,
        };
        if !report.total.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {}", self.step)));
        }
        self.opt_g.backward_step(&total)?;
        if gan {
            let disc = self.tok.discriminator();
            let real = (1.0 - disc.forward(&x)?)?.relu()?.mean_all()?;
            let fake = (disc.forward(&l.recon.detach())? + 1.0)?.relu()?.mean_all()?;
            let d_loss = (real + fake)?;
            report.gan_d = scalar(&d_loss)?;
            if !report.gan_d.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite discriminator loss at step {}",
                    self.step
                )));
            }
            self.opt_d.backward_step(&d_loss)?;
        }
        self.step += 1;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean cosine between reconstructed and backbone features.
    pub sem_cosine: f64,
    pub utilization_sem: Option<f64>,
    pub utilization_pix: Option<f64>,
}

/// Reconstruction and semantic fidelity over `images` without noise.
pub fn evaluate(tok: &DualTokenizer, images: &[Image], batch_size: usize) -> Result<EvalReport> {
    if images.is_empty() {
        return domain("evaluation set is empty");
    }
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut cos_sum = 0.0;
    let mut sem_ids: Vec<u32> = Vec::new();
    let mut pix_ids: Vec<u32> = Vec::new();
    for chunk in images.chunks(batch_size.max(1)) {
        let x = tok.images_to_tensor(chunk)?;
        let enc = tok.encode_tensor(&x)?;
        let b = enc.batch;
        let sem_codes = enc.sem.as_ref().map(|s| s.q.codes.clone());
        let pix_codes = enc.pix.as_ref().map(|p| p.q.codes.clone());
        if let Some(rec) = tok.reconstruct_semantic(&enc, sem_codes.as_ref(), pix_codes.as_ref())? {
            let (l, _) = semantic_loss(&rec, &enc.backbone.features)?;
            cos_sum += (1.0 - scalar(&l)?) * b as f64;
        }
        let (_, _, h, w) = x.dims4()?;
        let ((sh, sw), (ph, pw)) = tok.cfg.grid_dims(h, w)?;
        let sem_map = sem_codes.as_ref().map(|c| tok.to_map(c, b, (sh, sw))).transpose()?;
        let pix_map = pix_codes.as_ref().map(|c| tok.to_map(c, b, (ph, pw))).transpose()?;
        let input = tok.decoder_input(sem_map.as_ref(), pix_map.as_ref(), (ph, pw))?;
        let recon = Image::batch_from_tensor(&tok.decoder().forward(&input)?)?;
        for (r, o) in recon.iter().zip(chunk) {
            psnr_sum += psnr(r, o, 1.0)?.min(100.0);
            ssim_sum += ssim(r, o, 7.min(r.height).min(r.width), 1.0)?;
        }
        if let Some(s) = &enc.sem {
            sem_ids.extend(&s.q.indices);
        }
        if let Some(p) = &enc.pix {
            pix_ids.extend(&p.q.indices);
        }
    }
    let n = images.len() as f64;
    let util = |ids: &[u32], cb: Option<&Codebook>| -> Result<Option<f64>> {
        match cb {
            Some(cb) => Ok(Some(utilization([ids], cb.size())?.utilization)),
            None => Ok(None),
        }
    };
    Ok(EvalReport {
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        sem_cosine: cos_sum / n,
        utilization_sem: util(&sem_ids, tok.sem_codebook())?,
        utilization_pix: util(&pix_ids, tok.pix_codebook())?,
    })
}

#[cfg(test)]
mod tests {
    use super::super::TokenizerConfig;
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn semantic_loss_examples() {
        let a = t(&[1.0, 0.0, 0.0, 1.0], (2, 2));
        let (l, _) = semantic_loss(&a, &a).unwrap();
        assert!(scalar(&l).unwrap().abs() < 1e-12);
        let (l, _) = semantic_loss(&a, &a.neg().unwrap()).unwrap();
        assert!((scalar(&l).unwrap() - 2.0).abs() < 1e-12);
        let b = t(&[0.0, 1.0, 1.0, 0.0], (2, 2));
        let (l, _) = semantic_loss(&a, &b).unwrap();
        assert!((scalar(&l).unwrap() - 1.0).abs() < 1e-12);
        let z = t(&[0.0, 0.0, 0.0, 1.0], (2, 2));
        let (l, zeros) = semantic_loss(&z, &a).unwrap();
        assert_eq!(zeros, 1);
        assert!((scalar(&l).unwrap() - 0.5).abs() < 1e-12);
    }

    fn batch(seed: u64) -> Vec<Image> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2)
            .map(|_| Image::new(16, 16, (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect()
    }

    fn trainer(gan: bool) -> TokenizerTrainer {
        let tok = DualTokenizer::new(TokenizerConfig::toy(), 5, DType::F32).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            gan,
            weights: LossWeights {
                gan_start: 0.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        TokenizerTrainer::new(tok, cfg).unwrap()
    }

    #[test]
    fn train_step_contract() {
        let mut a = trainer(true);
        let mut b = trainer(true);
        let imgs = batch(1);
        let backbone = a.tok.store().snapshot(&[super::super::NS_BACKBONE]).unwrap();
        let ra = a.train_step(&imgs).unwrap();
        let rb = b.train_step(&imgs).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.tok.store().snapshot(&[super::super::NS_BACKBONE]).unwrap(), backbone);
        let w = a.config().weights;
        assert!((ra.combine(&w) - ra.total).abs() < 1e-5 * ra.total.abs().max(1.0));
        assert!((0.0..=2.0).contains(&ra.cosine_sem));
        for v in [ra.l1_pix, ra.perceptual, ra.gan_g, ra.gan_d] {
            assert!(v >= 0.0);
        }
        assert!(ra.gan_d > 0.0);
    }
}

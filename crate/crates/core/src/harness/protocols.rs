//! Fixed small-scale experiments whose outcomes are compared across variants.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toydata::{invert_triples, random_patch_images, toy_dataset, TOY_TEXT_VOCAB};
use crate::diffusion::{
    corrupt_tokens, source_conditions, CondMaskSpec, DiffusionConfig, DiffusionDecoder, DiffusionTrainConfig,
    DiffusionTrainer,
};
use crate::dualvitok::{evaluate, Branch, DualTokenizer, EvalReport, TokenizerConfig, TokenizerTrainer, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::nn::{scalar, space_to_channel, Adam, AdamConfig, Linear, ParamStore};
use crate::seqcodec::serialize;
use crate::unilm::{edit_sequence, FeatureTables, GenerationParams, LmTrainConfig, LmTrainer, ModelConfig, UniLm};
use crate::vq::{straight_through, utilization, Codebook, QuantizerKind};

/// Patch autoencoder over random-pixel images, used to compare quantizers by
/// how much of the codebook they end up using.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationProtocol {
    pub codes: usize,
    pub code_dim: usize,
    pub image_size: usize,
    pub steps: usize,
    pub batch_images: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_images: usize,
}

impl Default for UtilizationProtocol {
    fn default() -> Self {
        Self {
            codes: 512,
            code_dim: 16,
            image_size: 8,
            steps: 2000,
            batch_images: 16,
            lr: 1e-3,
            seed: 0,
            eval_images: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationOutcome {
    pub kind: QuantizerKind,
    pub utilization: f64,
    pub recon_mse: f64,
}

struct PatchAutoencoder {
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    codebook: Codebook,
}

const PATCH: usize = 2;
const HIDDEN: usize = 64;

impl PatchAutoencoder {
    fn new(store: &ParamStore, kind: QuantizerKind, p: &UtilizationProtocol) -> Result<Self> {
        let root = store.root();
        let pd = 3 * PATCH * PATCH;
        Ok(Self {
            enc1: root.pp("enc1").linear(pd, HIDDEN, true)?,
            enc2: root.pp("enc2").linear(HIDDEN, p.code_dim, true)?,
            dec1: root.pp("dec1").linear(p.code_dim, HIDDEN, true)?,
            dec2: root.pp("dec2").linear(HIDDEN, pd, true)?,
            codebook: Codebook::new(root.pp("codebook"), kind, p.codes, p.code_dim)?,
        })
    }

    fn patches(images: &[Image]) -> Result<Tensor> {
        let x = Image::batch_to_tensor(images, DType::F32, &Device::Cpu)?;
        let x = space_to_channel(&x, PATCH)?;
        let c = x.dim(1)?;
        Ok(x.permute((0, 2, 3, 1))?.contiguous()?.reshape(((), c))?)
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.enc2.forward(&self.enc1.forward(x)?.gelu()?)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.dec2.forward(&self.dec1.forward(z)?.gelu()?)
    }
}

/// Trains the patch autoencoder with the given quantizer and reports codebook
/// utilization over a held-out stream.
pub fn run_utilization(kind: QuantizerKind, p: &UtilizationProtocol) -> Result<UtilizationOutcome> {
    let store = ParamStore::new(p.seed, DType::F32);
    let model = PatchAutoencoder::new(&store, kind, p)?;
    let mut opt = Adam::new(
        store.all_vars().into_iter().map(|(_, v)| v).collect(),
        AdamConfig {
            lr: p.lr,
            ..AdamConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    for step in 0..p.steps {
        let seed = rand::Rng::random::<u64>(&mut rng);
        let x = PatchAutoencoder::patches(&random_patch_images(seed, p.batch_images, p.image_size))?;
        let z = model.encode(&x)?;
        let q = model.codebook.quantize_tensor(&z)?;
        let recon = model.decode(&straight_through(&z, &q.codes)?)?;
        let mse = (recon - &x)?.sqr()?.mean_all()?;
        let loss = ((mse + q.codebook_loss)? + (q.commitment_loss * 0.25)?)?;
        if !scalar(&loss)?.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {step}")));
        }
        opt.backward_step(&loss)?;
    }
    let eval = random_patch_images(p.seed.wrapping_add(0x5eed), p.eval_images, p.image_size);
    let mut ids = Vec::new();
    let mut sq = 0.0;
    let mut count = 0usize;
    for chunk in eval.chunks(64) {
        let x = PatchAutoencoder::patches(chunk)?;
        let q = model.codebook.quantize_tensor(&model.encode(&x)?)?;
        let recon = model.decode(&q.codes)?;
        sq += scalar(&(recon - &x)?.sqr()?.sum_all()?)?;
        count += x.elem_count();
        ids.push(q.indices);
    }
    let report = utilization(ids.iter().map(|v| v.as_slice()), p.codes)?;
    Ok(UtilizationOutcome {
        kind,
        utilization: report.utilization,
        recon_mse: sq / count.max(1) as f64,
    })
}

/// Shared toy budget for comparing tokenizer variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTokenizerProtocol {
    pub image_size: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub train: TrainConfig,
}

impl Default for ToyTokenizerProtocol {
    fn default() -> Self {
        Self {
            image_size: 32,
            train_images: 256,
            eval_images: 32,
            train: TrainConfig::default(),
        }
    }
}

/// Trains a toy tokenizer of the given configuration and evaluates it on held-out
/// toy images.
pub fn run_toy_tokenizer(cfg: TokenizerConfig, p: &ToyTokenizerProtocol) -> Result<EvalReport> {
    Ok(train_toy_tokenizer(cfg, p)?.1)
}

/// Like [`run_toy_tokenizer`] but also hands back the trained tokenizer.
pub fn train_toy_tokenizer(cfg: TokenizerConfig, p: &ToyTokenizerProtocol) -> Result<(DualTokenizer, EvalReport)> {
    let s = p.image_size;
    let data: Vec<Image> = toy_dataset(p.train.seed, p.train_images, s, s)
        .into_iter()
        .map(|x| x.image)
        .collect();
    let held_out: Vec<Image> = toy_dataset(p.train.seed.wrapping_add(1_000_003), p.eval_images, s, s)
        .into_iter()
        .map(|x| x.image)
        .collect();
    let tok = DualTokenizer::new(cfg, p.train.seed, DType::F32)?;
    let mut tr = TokenizerTrainer::new(tok, p.train.clone())?;
    let b = p.train.batch_size.min(data.len());
    for step in 0..p.train.steps {
        let i = (step * b) % (data.len() - b + 1);
        tr.train_step(&data[i..i + b])?;
    }
    let report = evaluate(&tr.tok, &held_out, b)?;
    Ok((tr.tok, report))
}

/// Toy tokenizer preset restricted to one branch.
pub fn toy_branch(branch: Branch) -> TokenizerConfig {
    TokenizerConfig {
        branch,
        ..TokenizerConfig::toy()
    }
}

/// Diffusion decoders trained under different conditioning masks, scored on
/// reconstruction from corrupted tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessProtocol {
    /// Side of the high-resolution targets.
    pub image_size: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub corruption: f64,
    pub seed: u64,
}

impl Default for RobustnessProtocol {
    fn default() -> Self {
        Self {
            image_size: 32,
            train_images: 256,
            eval_images: 16,
            steps: 600,
            batch_size: 8,
            lr: 2e-3,
            corruption: 0.1,
            seed: 0,
        }
    }
}

/// Trains a decoder with `mask` and returns its mean squared error against the
/// targets when sampling from corrupted conditions.
pub fn run_diffusion_robustness(tok: &DualTokenizer, mask: CondMaskSpec, p: &RobustnessProtocol) -> Result<f64> {
    let s = p.image_size;
    let targets: Vec<Image> = toy_dataset(p.seed.wrapping_add(7), p.train_images, s, s)
        .into_iter()
        .map(|x| x.image)
        .collect();
    let held_out: Vec<Image> = toy_dataset(p.seed.wrapping_add(2_000_003), p.eval_images, s, s)
        .into_iter()
        .map(|x| x.image)
        .collect();
    let conds = source_conditions(tok, &targets)?;
    let cfg = DiffusionConfig::toy(tok.config().pix_downsample, tok.config().code_dim);
    let model = DiffusionDecoder::new(cfg, tok, p.seed)?;
    let mut tr = DiffusionTrainer::new(
        model,
        DiffusionTrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: p.seed,
            mask,
        },
    )?;
    let b = p.batch_size.min(targets.len());
    for step in 0..p.steps {
        let i = (step * b) % (targets.len() - b + 1);
        tr.train_step(&targets[i..i + b], &conds[i..i + b])?;
    }
    let (ks, kp) = (
        tok.sem_codebook().map_or(1, |c| c.size()),
        tok.pix_codebook().map_or(1, |c| c.size()),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(99));
    let mut total = 0.0;
    for (i, (cond, target)) in source_conditions(tok, &held_out)?.iter().zip(&held_out).enumerate() {
        let bad = corrupt_tokens(cond, p.corruption, ks, kp, &mut rng);
        let out = tr.model.sample(&bad, p.seed.wrapping_add(i as u64))?;
        let mse = out
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / target.data.len() as f64;
        total += mse;
    }
    Ok(total / held_out.len() as f64)
}

/// Fine-tuning a small model on color-inversion edits and decoding them back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditProtocol {
    pub triples: usize,
    pub image_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub layers: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EditProtocol {
    fn default() -> Self {
        Self {
            triples: 50,
            image_size: 16,
            steps: 400,
            batch_size: 10,
            lr: 3e-3,
            layers: 2,
            dim: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    /// Fraction of generated block tokens equal to the target's, position by position.
    pub token_accuracy: f64,
    /// Whether every generated block had its source's grid dims.
    pub dims_match: bool,
    pub final_loss: f64,
}

/// Trains on `p.triples` edits and greedily regenerates each one.
pub fn run_edit_overfit(tok: &DualTokenizer, p: &EditProtocol) -> Result<EditOutcome> {
    let s = p.image_size;
    let layout = tok.config().layout_for_pixels(TOY_TEXT_VOCAB, s as u32, s as u32)?;
    let triples = invert_triples(p.seed, p.triples, s, s);
    let mut sources = Vec::with_capacity(triples.len());
    let mut targets = Vec::with_capacity(triples.len());
    let mut seqs = Vec::with_capacity(triples.len());
    for e in &triples {
        let src = tok.encode(&e.source)?;
        let tgt = tok.encode(&e.target)?;
        seqs.push(edit_sequence(&src, &e.instruction, Some(&tgt), &layout)?);
        targets.push(serialize(&tgt.to_block()?, &layout)?);
        sources.push(src);
    }
    let mc = ModelConfig {
        layers: p.layers,
        heads: 4,
        dim: p.dim,
        context: 256,
        mlp_ratio: 2,
        ..ModelConfig::tiny(layout, tok.config().code_dim)
    };
    let mut model = UniLm::new(mc, p.seed, DType::F32)?;
    model.set_feature_tables(FeatureTables::from_tokenizer(tok)?);
    let mut tr = LmTrainer::new(
        model,
        LmTrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: p.seed,
            ..LmTrainConfig::default()
        },
    )?;
    let b = p.batch_size.min(seqs.len());
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut final_loss = f64::NAN;
    let mut cursor = seqs.len();
    for _ in 0..p.steps {
        if cursor + b > seqs.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<_> = order[cursor..cursor + b].iter().map(|&i| seqs[i].clone()).collect();
        cursor += b;
        final_loss = tr.train_step(&batch)?;
    }
    let params = GenerationParams {
        cfg_scale: 1.0,
        temperature: 1.0,
        top_k: 1,
        seed: p.seed,
        ..GenerationParams::default()
    };
    let (mut hits, mut total) = (0usize, 0usize);
    let mut dims_match = true;
    for ((src, e), want) in sources.iter().zip(&triples).zip(&targets) {
        let block = tr.model.edit_image(src, &e.instruction, &params)?;
        dims_match &= block.sem_dims() == src.to_block()?.sem_dims() && block.pix_dims() == src.to_block()?.pix_dims();
        let got = serialize(&block, &layout)?;
        hits += got.iter().zip(want).filter(|(a, b)| a == b).count();
        total += want.len().max(got.len());
    }
    Ok(EditOutcome {
        token_accuracy: hits as f64 / total.max(1) as f64,
        dims_match,
        final_loss,
    })
}

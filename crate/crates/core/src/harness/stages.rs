//! Stage orchestration for the progressive training pipeline.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, StageId};
use super::metrics::MetricsRecord;
use super::toydata::{invert_triples, toy_dataset, toy_sample, TOY_TEXT_VOCAB};
use crate::datapipe::{bucket_batches, integrity_filter, match_ratio, stage_resolution, ResolutionMode, ASPECT_RATIOS};
use crate::diffusion::{source_conditions, DiffusionDecoder, DiffusionTrainConfig, DiffusionTrainer};
use crate::dualvitok::{evaluate, DualTokenizer, TokenizerTrainer};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::nn::load_tensors;
use crate::seqcodec::VocabLayout;
use crate::unilm::{
    edit_sequence, reconstruction_sequence, text_to_image_sequence, FeatureTables, LmTrainConfig, LmTrainer,
    ModelConfig, MultimodalSequence, UniLm,
};

/// Result of running (or resuming) one stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: StageId,
    pub checkpoint: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    /// True when a finished checkpoint was found and training was skipped.
    pub resumed: bool,
}

pub fn checkpoint_path(cfg: &RunConfig, id: StageId) -> PathBuf {
    cfg.out_dir.join(format!("{}.safetensors", id.name()))
}

pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("metrics.jsonl")
}

/// Appends records to a newline-delimited JSON stream.
pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn require(cfg: &RunConfig, stage: StageId, pre: StageId) -> Result<PathBuf> {
    let path = checkpoint_path(cfg, pre);
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            stage: stage.name().into(),
            what: format!("{} checkpoint at {}", pre.name(), path.display()),
        });
    }
    Ok(path)
}

fn finished(path: &Path, run_hash: &str) -> bool {
    match load_tensors(path, &candle_core::Device::Cpu) {
        Ok((_, meta)) => meta.get("run_hash").map(String::as_str) == Some(run_hash),
        Err(_) => false,
    }
}

fn log_every(steps: usize) -> usize {
    (steps / 10).max(1)
}

/// Runs one stage, skipping it when a checkpoint from the same configuration
/// already exists. Metrics are appended to the run's stream.
pub fn run_stage(cfg: &RunConfig, id: StageId) -> Result<StageOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let ckpt = checkpoint_path(cfg, id);
    if let Some(pre) = id.prerequisite() {
        require(cfg, id, pre)?;
    }
    if id.is_lm() {
        require(cfg, id, StageId::Tokenizer)?;
    }
    let run_hash = cfg.hash();
    if finished(&ckpt, &run_hash) {
        return Ok(StageOutcome {
            stage: id,
            checkpoint: ckpt,
            metrics: Vec::new(),
            resumed: true,
        });
    }
    let metrics = match id {
        StageId::Tokenizer => tokenizer_stage(cfg, &ckpt)?,
        StageId::Diffusion => diffusion_stage(cfg, &ckpt)?,
        _ => lm_stage(cfg, id, &ckpt)?,
    };
    stamp(&ckpt, &run_hash)?;
    append_metrics(&metrics_path(cfg), &metrics)?;
    Ok(StageOutcome {
        stage: id,
        checkpoint: ckpt,
        metrics,
        resumed: false,
    })
}

/// Runs every configured stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<StageOutcome>> {
    cfg.stages.iter().map(|&id| run_stage(cfg, id)).collect()
}

/// Records the run hash in a finished checkpoint's metadata.
fn stamp(path: &Path, run_hash: &str) -> Result<()> {
    let (tensors, mut meta) = load_tensors(path, &candle_core::Device::Cpu)?;
    meta.insert("run_hash".into(), run_hash.into());
    let tensors: Vec<(String, candle_core::Tensor)> = tensors.into_iter().collect();
    crate::nn::save_tensors(path, &tensors, meta)
}

fn record(stage: StageId, step: usize, losses: &[(&str, f64)]) -> MetricsRecord {
    MetricsRecord {
        step,
        stage: stage.name().into(),
        losses: losses.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
        ..MetricsRecord::default()
    }
}

fn toy_images(seed: u64, n: usize, size: usize) -> Vec<Image> {
    toy_dataset(seed, n, size, size).into_iter().map(|s| s.image).collect()
}

fn tokenizer_stage(cfg: &RunConfig, ckpt: &Path) -> Result<Vec<MetricsRecord>> {
    let s = cfg.data.image_size;
    let data = toy_images(cfg.seed, cfg.data.train_images, s);
    let held_out = toy_images(cfg.seed.wrapping_add(1_000_003), cfg.data.eval_images, s);
    let tok = DualTokenizer::new(cfg.tokenizer.clone(), cfg.seed, DType::F32)?;
    let train = cfg.tokenizer_train.clone();
    let b = train.batch_size.min(data.len());
    let mut tr = TokenizerTrainer::new(tok, train.clone())?;
    let mut out = Vec::new();
    let every = log_every(train.steps);
    for step in 0..train.steps {
        let i = (step * b) % (data.len() - b + 1);
        let r = tr.train_step(&data[i..i + b])?;
        if step % every == 0 || step + 1 == train.steps {
            out.push(record(
                StageId::Tokenizer,
                step,
                &[
                    ("total", r.total),
                    ("cosine_sem", r.cosine_sem),
                    ("l1_pix", r.l1_pix),
                    ("perceptual", r.perceptual),
                    ("gan_g", r.gan_g),
                    ("gan_d", r.gan_d),
                    ("vq", r.vq),
                ],
            ));
        }
    }
    let e = evaluate(&tr.tok, &held_out, b)?;
    out.push(MetricsRecord {
        step: train.steps,
        stage: StageId::Tokenizer.name().into(),
        psnr: Some(e.psnr),
        ssim: Some(e.ssim),
        sem_cosine: Some(e.sem_cosine),
        utilization_sem: e.utilization_sem,
        utilization_pix: e.utilization_pix,
        losses: BTreeMap::new(),
    });
    tr.tok.save(ckpt)?;
    Ok(out)
}

fn diffusion_stage(cfg: &RunConfig, ckpt: &Path) -> Result<Vec<MetricsRecord>> {
    let tok = DualTokenizer::from_checkpoint(&checkpoint_path(cfg, StageId::Tokenizer))?;
    let s = cfg.data.image_size;
    let targets = toy_images(cfg.seed.wrapping_add(7), cfg.data.train_images, s);
    let conds = source_conditions(&tok, &targets)?;
    let model = DiffusionDecoder::new(cfg.diffusion_config(), &tok, cfg.seed)?;
    let t = &cfg.diffusion_train;
    let mut tr = DiffusionTrainer::new(
        model,
        DiffusionTrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: cfg.seed,
            mask: t.mask,
        },
    )?;
    let b = t.batch_size.min(targets.len());
    let every = log_every(t.steps);
    let mut out = Vec::new();
    for step in 0..t.steps {
        let i = (step * b) % (targets.len() - b + 1);
        let loss = tr.train_step(&targets[i..i + b], &conds[i..i + b])?;
        if step % every == 0 || step + 1 == t.steps {
            out.push(record(StageId::Diffusion, step, &[("denoise", loss)]));
        }
    }
    tr.model.save(ckpt)?;
    Ok(out)
}

/// The vocabulary a run's language model addresses.
pub fn run_layout(cfg: &RunConfig) -> Result<VocabLayout> {
    let side = cfg.lm.max_image_side;
    cfg.tokenizer.layout_for_pixels(TOY_TEXT_VOCAB, side, side)
}

/// The freshly initialized language model a run starts Stage 1 from.
pub fn new_lm(cfg: &RunConfig, tok: &DualTokenizer) -> Result<UniLm> {
    let l = &cfg.lm;
    let mc = ModelConfig {
        layers: l.layers,
        heads: l.heads,
        dim: l.dim,
        context: l.context,
        mlp_ratio: l.mlp_ratio,
        layout: run_layout(cfg)?,
        sem_feature_dim: tok.config().code_dim,
        pix_feature_dim: tok.config().code_dim,
        input_mode: l.input_mode,
    };
    UniLm::new(mc, cfg.seed, DType::F32)
}

/// Training sequences for a language-model stage, grouped into batches of a
/// single resolution.
fn lm_batches(cfg: &RunConfig, id: StageId, tok: &DualTokenizer, layout: &VocabLayout) -> Result<Vec<Vec<MultimodalSequence>>> {
    let sched = cfg.lm_schedule(id).expect("lm stage");
    let plan = cfg.stage_plan(id).expect("lm stage");
    let m = tok.config().multiple() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (id as u64 + 1) * 0x9e37_79b9);
    let mut samples: Vec<(MultimodalSequence, (u32, u32))> = Vec::new();
    for _ in 0..cfg.data.lm_samples {
        let (src_w, src_h) = match sched.mode {
            ResolutionMode::Fixed { size } => (size, size),
            ResolutionMode::Anyres { budget } => {
                let side = (budget as f64).sqrt() as u32;
                (rng.random_range(side / 2..=side * 2), rng.random_range(side / 2..=side * 2))
            }
        };
        let crop = match_ratio(src_w, src_h, &ASPECT_RATIOS)?;
        if !integrity_filter(&crop) {
            continue;
        }
        // Ratios with no divisible size inside the budget cannot be used.
        let Ok((th, tw)) = stage_resolution(&plan, src_w, src_h, m) else {
            continue;
        };
        let sample = toy_sample(&mut rng, src_h as usize, src_w as usize);
        let image = sample.image.crop_resize(
            crop.x as usize,
            crop.y as usize,
            crop.w as usize,
            crop.h as usize,
            th as usize,
            tw as usize,
        );
        let enc = tok.encode(&image)?;
        let seq = match id {
            StageId::Mllm1 => reconstruction_sequence(&enc, layout)?,
            _ => text_to_image_sequence(&sample.caption, &enc, layout)?,
        };
        samples.push((seq, (th, tw)));
    }
    if id == StageId::Mllm3 {
        let side = cfg.data.image_size.min(cfg.lm.max_image_side as usize);
        let side = side - side % m as usize;
        for e in invert_triples(cfg.seed.wrapping_add(11), cfg.data.edit_triples, side, side) {
            let seq = edit_sequence(&tok.encode(&e.source)?, &e.instruction, Some(&tok.encode(&e.target)?), layout)?;
            samples.push((seq, (side as u32, side as u32)));
        }
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("stage {id} produced no training samples")));
    }
    bucket_batches(&samples.iter().map(|(s, r)| (s.clone(), *r)).collect::<Vec<_>>(), sched.batch_size, Some(cfg.seed))
}

fn lm_stage(cfg: &RunConfig, id: StageId, ckpt: &Path) -> Result<Vec<MetricsRecord>> {
    let tok = DualTokenizer::from_checkpoint(&checkpoint_path(cfg, StageId::Tokenizer))?;
    let mut model = match id {
        StageId::Mllm1 => new_lm(cfg, &tok)?,
        _ => UniLm::from_checkpoint(&checkpoint_path(cfg, id.prerequisite().expect("later stage")))?,
    };
    model.set_feature_tables(FeatureTables::from_tokenizer(&tok)?);
    let layout = *model.layout();
    let batches = lm_batches(cfg, id, &tok, &layout)?;
    let sched = cfg.lm_schedule(id).expect("lm stage");
    let plan = cfg.stage_plan(id).expect("lm stage");
    let mut tr = LmTrainer::new(
        model,
        LmTrainConfig {
            steps: sched.steps,
            batch_size: sched.batch_size,
            lr: sched.lr,
            seed: cfg.seed,
            uncond_prob: sched.uncond_prob,
            trainable: plan.trainable,
        },
    )?;
    let every = log_every(sched.steps);
    let mut out = Vec::new();
    for step in 0..sched.steps {
        let loss = tr.train_step(&batches[step % batches.len()])?;
        if step % every == 0 || step + 1 == sched.steps {
            out.push(record(id, step, &[("next_token", loss)]));
        }
    }
    tr.model.save(ckpt)?;
    Ok(out)
}

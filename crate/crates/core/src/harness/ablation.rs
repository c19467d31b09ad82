//! Design-space comparisons under one fixed toy protocol.

use std::collections::BTreeMap;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::protocols::{run_toy_tokenizer, ToyTokenizerProtocol};
use super::toydata::{toy_dataset, TOY_TEXT_VOCAB};
use crate::dualvitok::{Branch, DualTokenizer, EvalReport, NoiseKind, NoiseSpec, TokenizerConfig, TokenizerTrainer};
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::unilm::{
    text_to_image_sequence, InputMode, LmTrainConfig, LmTrainer, ModelConfig, MultimodalSequence, UniLm,
};
use crate::vq::QuantizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    QuantizerKind,
    CodebookDim,
    Noise,
    Width,
    DcBlock,
    Branch,
    InputMode,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::QuantizerKind,
        AblationAxis::CodebookDim,
        AblationAxis::Noise,
        AblationAxis::Width,
        AblationAxis::DcBlock,
        AblationAxis::Branch,
        AblationAxis::InputMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::QuantizerKind => "quantizer_kind",
            AblationAxis::CodebookDim => "codebook_dim",
            AblationAxis::Noise => "noise",
            AblationAxis::Width => "width",
            AblationAxis::DcBlock => "dc_block",
            AblationAxis::Branch => "branch",
            AblationAxis::InputMode => "input_mode",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = AblationAxis::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown ablation axis {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Tokenizer variants along an axis, labelled.
pub fn tokenizer_variants(base: &TokenizerConfig, axis: AblationAxis) -> Vec<(String, TokenizerConfig, Option<NoiseSpec>)> {
    let with = |f: &dyn Fn(&mut TokenizerConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::QuantizerKind => [QuantizerKind::Vanilla, QuantizerKind::Simvq]
            .into_iter()
            .map(|k| (k.tag().to_string(), with(&|c| c.quantizer = k), None))
            .collect(),
        AblationAxis::CodebookDim => [32usize, 16, 8]
            .into_iter()
            .map(|d| (d.to_string(), with(&|c| c.code_dim = d), None))
            .collect(),
        AblationAxis::Noise => {
            let mut rows = vec![("none".to_string(), base.clone(), Some(NoiseSpec::none()))];
            for kind in [NoiseKind::Random, NoiseKind::Zero] {
                for (a, b) in [(0.1, 1.0), (0.1, 0.5), (0.1, 0.1), (0.5, 0.1), (1.0, 0.1)] {
                    let tag = match kind {
                        NoiseKind::Zero => "zero",
                        _ => "random",
                    };
                    let spec = NoiseSpec::new(kind, a, b).expect("valid rates");
                    rows.push((format!("{tag}/{a}/{b}"), base.clone(), Some(spec)));
                }
            }
            rows
        }
        AblationAxis::Width => {
            let (e, d) = (base.enc_channels, base.dec_channels);
            // Equal widths, then the narrower-encoder / wider-decoder pairs.
            [(d, d), (e, d), (e, d + d / 2)]
                .into_iter()
                .map(|(enc, dec)| {
                    (
                        format!("{enc}/{dec}"),
                        with(&|c| {
                            c.enc_channels = enc;
                            c.dec_channels = dec;
                        }),
                        None,
                    )
                })
                .collect()
        }
        AblationAxis::DcBlock => [false, true]
            .into_iter()
            .map(|dc| (if dc { "dc" } else { "origin" }.to_string(), with(&|c| c.dc_block = dc), None))
            .collect(),
        AblationAxis::Branch => [("semantic", Branch::Semantic), ("pixel", Branch::Pixel), ("dual", Branch::Dual)]
            .into_iter()
            .map(|(l, b)| (l.to_string(), with(&|c| c.branch = b), None))
            .collect(),
        AblationAxis::InputMode => Vec::new(),
    }
}

fn eval_metrics(e: &EvalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("psnr".into(), e.psnr);
    m.insert("ssim".into(), e.ssim);
    m.insert("sem_cosine".into(), e.sem_cosine);
    if let Some(u) = e.utilization_sem {
        m.insert("utilization_sem".into(), u);
    }
    if let Some(u) = e.utilization_pix {
        m.insert("utilization_pix".into(), u);
    }
    m
}

/// Trains every variant of `axis` with the run's seed and budget and tabulates
/// the held-out metrics.
pub fn run_ablation(cfg: &RunConfig, axis: AblationAxis) -> Result<AblationTable> {
    cfg.validate()?;
    let rows = match axis {
        AblationAxis::InputMode => input_mode_rows(cfg)?,
        _ => {
            let mut rows = Vec::new();
            for (label, tc, noise) in tokenizer_variants(&cfg.tokenizer, axis) {
                let mut train = cfg.tokenizer_train.clone();
                train.seed = cfg.seed;
                if let Some(n) = noise {
                    train.noise = n;
                }
                let p = ToyTokenizerProtocol {
                    image_size: cfg.data.image_size,
                    train_images: cfg.data.train_images,
                    eval_images: cfg.data.eval_images,
                    train,
                };
                let e = run_toy_tokenizer(tc, &p)?;
                rows.push(AblationRow {
                    label,
                    metrics: eval_metrics(&e),
                });
            }
            rows
        }
    };
    Ok(AblationTable {
        axis,
        seed: cfg.seed,
        rows,
    })
}

/// Continuous versus discrete image inputs for the language model, trained on
/// the same text-to-image sequences from one shared tokenizer.
fn input_mode_rows(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let s = cfg.data.image_size;
    let images = toy_dataset(cfg.seed, cfg.data.train_images, s, s);
    let tok = DualTokenizer::new(cfg.tokenizer.clone(), cfg.seed, DType::F32)?;
    let mut train = cfg.tokenizer_train.clone();
    train.seed = cfg.seed;
    let b = train.batch_size.min(images.len());
    let mut tr = TokenizerTrainer::new(tok, train.clone())?;
    let plain: Vec<_> = images.iter().map(|x| x.image.clone()).collect();
    for step in 0..train.steps {
        let i = (step * b) % (plain.len() - b + 1);
        tr.train_step(&plain[i..i + b])?;
    }
    let tok = tr.tok;
    let side = cfg.lm.max_image_side.max(s as u32);
    let layout = tok.config().layout_for_pixels(TOY_TEXT_VOCAB, side, side)?;
    let seqs: Vec<MultimodalSequence> = images
        .iter()
        .map(|x| text_to_image_sequence(&x.caption, &tok.encode(&x.image)?, &layout))
        .collect::<Result<_>>()?;
    let held = seqs.len() / 8;
    let (eval, train_seqs) = seqs.split_at(held.max(1).min(seqs.len() - 1));
    let sched = &cfg.lm_train.stage2a;
    let mut rows = Vec::new();
    for (label, mode) in [("continuous", InputMode::Continuous), ("discrete", InputMode::Discrete)] {
        let l = &cfg.lm;
        let mc = ModelConfig {
            layers: l.layers,
            heads: l.heads,
            dim: l.dim,
            context: l.context,
            mlp_ratio: l.mlp_ratio,
            layout,
            sem_feature_dim: tok.config().code_dim,
            pix_feature_dim: tok.config().code_dim,
            input_mode: mode,
        };
        let model = UniLm::new(mc, cfg.seed, DType::F32)?;
        let mut lt = LmTrainer::new(
            model,
            LmTrainConfig {
                steps: sched.steps,
                batch_size: sched.batch_size,
                lr: sched.lr,
                seed: cfg.seed,
                uncond_prob: sched.uncond_prob,
                ..LmTrainConfig::default()
            },
        )?;
        let bs = sched.batch_size.min(train_seqs.len());
        let mut last = f64::NAN;
        for step in 0..sched.steps {
            let i = (step * bs) % (train_seqs.len() - bs + 1);
            last = lt.train_step(&train_seqs[i..i + bs])?;
        }
        let held_loss = scalar(&lt.model.next_token_loss(eval)?)?;
        let mut m = BTreeMap::new();
        m.insert("train_loss".into(), last);
        m.insert("held_out_loss".into(), held_loss);
        rows.push(AblationRow {
            label: label.into(),
            metrics: m,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!(matches!("colour".parse::<AblationAxis>(), Err(Error::Config(_))));
    }

    #[test]
    fn variant_rows_match_the_axis() {
        let base = TokenizerConfig::toy();
        let labels = |a| {
            tokenizer_variants(&base, a)
                .into_iter()
                .map(|(l, _, _)| l)
                .collect::<Vec<_>>()
        };
        assert_eq!(labels(AblationAxis::QuantizerKind), ["vanilla", "simvq"]);
        assert_eq!(labels(AblationAxis::CodebookDim), ["32", "16", "8"]);
        assert_eq!(labels(AblationAxis::Branch), ["semantic", "pixel", "dual"]);
        assert_eq!(labels(AblationAxis::Noise).len(), 11);
        for (_, c, _) in tokenizer_variants(&base, AblationAxis::Width) {
            c.validate().unwrap();
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Element, MultimodalSequence, UniLm, NS_ADAPTER_PIX, NS_ADAPTER_SEM, NS_BODY, NS_HEAD,
    NS_POSITIONS, NS_TEXT_EMBED,
};
use crate::datapipe::ParamGroup;
use crate::error::{domain, Error, Result};
use crate::nn::{scalar, Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Chance of training a sample on its unconditional context.
    pub uncond_prob: f64,
    pub trainable: Vec<ParamGroup>,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            uncond_prob: 0.1,
            trainable: vec![
                ParamGroup::Adapters,
                ParamGroup::VisionEmbeddings,
                ParamGroup::VisionHead,
                ParamGroup::Body,
                ParamGroup::TextEmbeddings,
                ParamGroup::TextHead,
            ],
        }
    }
}

pub struct LmTrainer {
    pub model: UniLm,
    cfg: LmTrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl LmTrainer {
    pub fn new(model: UniLm, cfg: LmTrainConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.uncond_prob) {
            return domain("uncond_prob must lie in [0, 1]");
        }
        if cfg.batch_size == 0 {
            return domain("batch size must be at least 1");
        }
        let opt = build_optimizer(&model, &cfg.trainable, cfg.lr)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            opt,
        })
    }

    pub fn config(&self) -> &LmTrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.opt.steps()
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[MultimodalSequence]) -> Result<f64> {
        let mask = self.model.config().mask_id();
        let mut seqs: Vec<MultimodalSequence> = batch
            .iter()
            .map(|s| {
                if !s.cond_span.is_empty() && self.rng.random_bool(self.cfg.uncond_prob) {
                    s.unconditional(mask)
                } else {
                    s.clone()
                }
            })
            .collect();
        pad_batch(&mut seqs);
        let loss = self.model.next_token_loss(&seqs)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {}", self.opt.steps())));
        }
        self.opt.backward_step(&loss)?;
        Ok(value)
    }
}

/// Right-pads sequences to a common length with unsupervised filler.
pub fn pad_batch(seqs: &mut [MultimodalSequence]) {
    let t = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    for s in seqs.iter_mut() {
        while s.len() < t {
            s.push(Element::Id(0), false);
        }
    }
}

/// Adam over the requested parameter groups. Embedding and head rows are split
/// between text (including the mask row) and vision ids.
fn build_optimizer(model: &UniLm, groups: &[ParamGroup], lr: f64) -> Result<Adam> {
    let has = |g: ParamGroup| groups.contains(&g);
    let store = model.store();
    let layout = *model.layout();
    let v = model.config().vocab();
    let mut whole = Vec::new();
    let mut prefixes: Vec<&str> = Vec::new();
    if has(ParamGroup::Adapters) {
        prefixes.extend([NS_ADAPTER_SEM, NS_ADAPTER_PIX]);
    }
    if has(ParamGroup::Body) {
        prefixes.extend([NS_BODY, NS_POSITIONS]);
    }
    whole.extend(store.vars_with_prefix(&prefixes).into_iter().map(|(_, v)| v));
    let mut opt = Adam::new(
        whole,
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
    )?;
    let vision_rows = |n: usize| -> Vec<bool> { (0..n).map(|i| layout.is_vision(i as u32)).collect() };
    let pick = |n: usize, vision: bool, text: bool| -> Option<Vec<bool>> {
        match (vision, text) {
            (false, false) => None,
            (true, true) => Some(vec![true; n]),
            (true, false) => Some(vision_rows(n)),
            (false, true) => Some(vision_rows(n).into_iter().map(|b| !b).collect()),
        }
    };
    let missing = |name: &str| Error::Domain(format!("parameter {name} missing"));
    let embed_name = format!("{NS_TEXT_EMBED}.weight");
    if let Some(rows) = pick(v + 1, has(ParamGroup::VisionEmbeddings), has(ParamGroup::TextEmbeddings)) {
        opt.push_row_masked(store.get(&embed_name).ok_or_else(|| missing(&embed_name))?, &rows)?;
    }
    if let Some(rows) = pick(v, has(ParamGroup::VisionHead), has(ParamGroup::TextHead)) {
        for p in ["weight", "bias"] {
            let name = format!("{NS_HEAD}.{p}");
            opt.push_row_masked(store.get(&name).ok_or_else(|| missing(&name))?, &rows)?;
        }
    }
    Ok(opt)
}

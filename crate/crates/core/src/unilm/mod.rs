//! Unified autoregressive transformer over text and image tokens.
//!
//! Images enter as continuous pre-quantization features through two adapters
//! (one per tokenizer branch) and leave as discrete ids from a single output
//! head spanning the whole [`VocabLayout`].

mod generate;
mod sequence;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use generate::{cfg_logits, sample_from_logits, GenerationParams};
pub use sequence::{
    edit_sequence, image_elements, reconstruction_sequence, text_to_image_sequence, Element,
    FeatureBranch, MultimodalSequence,
};
pub use train::{LmTrainConfig, LmTrainer};

use crate::dualvitok::{check_hash, DualTokenizer};
use crate::error::{domain, Error, Result};
use crate::nn::{
    causal_mask, log_softmax_last, Init, KvCache, LayerNorm, Linear, ParamStore, TransformerBlock,
};
use crate::seqcodec::VocabLayout;

pub const NS_TEXT_EMBED: &str = "embed";
pub const NS_POSITIONS: &str = "positions";
pub const NS_BODY: &str = "body";
pub const NS_HEAD: &str = "head";
pub const NS_ADAPTER_SEM: &str = "adapter_sem";
pub const NS_ADAPTER_PIX: &str = "adapter_pix";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Image positions are fed pre-quantization features through adapters.
    Continuous,
    /// Image positions are fed through the token embedding table.
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub context: usize,
    pub mlp_ratio: usize,
    pub layout: VocabLayout,
    pub sem_feature_dim: usize,
    pub pix_feature_dim: usize,
    pub input_mode: InputMode,
}

impl ModelConfig {
    pub fn desk(layout: VocabLayout, feature_dim: usize) -> Self {
        Self {
            layers: 8,
            heads: 8,
            dim: 512,
            context: 1536,
            mlp_ratio: 3,
            layout,
            sem_feature_dim: feature_dim,
            pix_feature_dim: feature_dim,
            input_mode: InputMode::Continuous,
        }
    }

    /// A model small enough for unit tests and minute-scale overfitting.
    pub fn tiny(layout: VocabLayout, feature_dim: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            context: 256,
            mlp_ratio: 2,
            ..Self::desk(layout, feature_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.context == 0 {
            return domain("model needs at least one layer and a positive context");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return domain(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }

    /// Size of the output head.
    pub fn vocab(&self) -> usize {
        self.layout.vocab_size() as usize
    }

    /// Input-only id standing in for masked-out prompt text.
    pub fn mask_id(&self) -> u32 {
        self.layout.vocab_size()
    }
}

/// Codebook tables used to turn generated ids back into input features.
#[derive(Debug, Clone)]
pub struct FeatureTables {
    pub sem: Tensor,
    pub pix: Tensor,
}

impl FeatureTables {
    pub fn from_tokenizer(tok: &DualTokenizer) -> Result<Self> {
        let sem = tok
            .sem_codebook()
            .ok_or_else(|| Error::Domain("tokenizer has no semantic codebook".into()))?;
        let pix = tok
            .pix_codebook()
            .ok_or_else(|| Error::Domain("tokenizer has no pixel codebook".into()))?;
        Ok(Self {
            sem: sem.effective()?.detach().to_dtype(DType::F32)?,
            pix: pix.effective()?.detach().to_dtype(DType::F32)?,
        })
    }

    pub fn feature(&self, branch: FeatureBranch, code: u32) -> Result<Vec<f32>> {
        let t = match branch {
            FeatureBranch::Semantic => &self.sem,
            FeatureBranch::Pixel => &self.pix,
        };
        Ok(t.get(code as usize)?.to_vec1::<f32>()?)
    }
}

pub struct UniLm {
    cfg: ModelConfig,
    store: ParamStore,
    embed: Tensor,
    positions: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
    adapter_sem: Linear,
    adapter_pix: Linear,
    tables: Option<FeatureTables>,
}

impl UniLm {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let v = cfg.vocab();
        let embed = root
            .pp(NS_TEXT_EMBED)
            .var("weight", &[v + 1, cfg.dim], Init::Normal(0.02))?;
        let positions = root
            .pp(NS_POSITIONS)
            .var("weight", &[cfg.context, cfg.dim], Init::Normal(0.02))?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                TransformerBlock::new(
                    root.pp(NS_BODY).pp(format!("block{i}")),
                    cfg.dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        let norm = root.pp(NS_BODY).pp("norm").layer_norm(cfg.dim)?;
        let head = root.pp(NS_HEAD).linear(cfg.dim, v, true)?;
        let adapter_sem = root.pp(NS_ADAPTER_SEM).linear(cfg.sem_feature_dim, cfg.dim, true)?;
        let adapter_pix = root.pp(NS_ADAPTER_PIX).linear(cfg.pix_feature_dim, cfg.dim, true)?;
        Ok(Self {
            cfg,
            store,
            embed,
            positions,
            blocks,
            norm,
            head,
            adapter_sem,
            adapter_pix,
            tables: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.cfg.layout
    }

    pub fn set_feature_tables(&mut self, tables: FeatureTables) {
        self.tables = Some(tables);
    }

    pub fn feature_tables(&self) -> Option<&FeatureTables> {
        self.tables.as_ref()
    }

    /// The single output projection shared by text and image ids.
    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Embeds a batch of equal-length sequences to (B, T, dim), without
    /// positions.
    pub fn embed_multimodal(&self, batch: &[&MultimodalSequence]) -> Result<Tensor> {
        let Some(first) = batch.first() else {
            return domain("empty batch");
        };
        let t = first.len();
        if batch.iter().any(|s| s.len() != t) {
            return domain("sequences in a batch must share one length");
        }
        let continuous = self.cfg.input_mode == InputMode::Continuous;
        let limit = self.cfg.mask_id();
        let mut ids = Vec::with_capacity(batch.len() * t);
        let mut sem_rows: Vec<f32> = Vec::new();
        let mut pix_rows: Vec<f32> = Vec::new();
        // Source row of every position in cat[ids ; sem adapter ; pix adapter].
        let mut slots: Vec<(u8, usize)> = Vec::with_capacity(batch.len() * t);
        for seq in batch {
            for (pos, el) in seq.elements.iter().enumerate() {
                let id = el.id();
                if id > limit {
                    return domain(format!("input id {id} outside vocabulary"));
                }
                ids.push(id);
                match el {
                    Element::Feature { branch, vector, .. } if continuous => {
                        let (rows, want) = match branch {
                            FeatureBranch::Semantic => (&mut sem_rows, self.cfg.sem_feature_dim),
                            FeatureBranch::Pixel => (&mut pix_rows, self.cfg.pix_feature_dim),
                        };
                        if vector.len() != want {
                            return domain(format!(
                                "feature at position {pos} has dim {}, adapter expects {want}",
                                vector.len()
                            ));
                        }
                        let k = rows.len() / want;
                        rows.extend_from_slice(vector);
                        slots.push((if *branch == FeatureBranch::Semantic { 1 } else { 2 }, k));
                    }
                    Element::Id(id)
                        if continuous
                            && (self.cfg.layout.is_sem_code(*id) || self.cfg.layout.is_pix_code(*id)) =>
                    {
                        return domain(format!(
                            "image token at position {pos} has no continuous features"
                        ));
                    }
                    _ => slots.push((0, slots.len())),
                }
            }
        }
        let dev = self.device();
        let n = ids.len();
        let id_t = Tensor::from_vec(ids, n, dev)?;
        let mut parts = vec![self.embed.index_select(&id_t, 0)?];
        let sem_n = sem_rows.len() / self.cfg.sem_feature_dim.max(1);
        let pix_n = pix_rows.len() / self.cfg.pix_feature_dim.max(1);
        let dtype = self.store.dtype();
        if sem_n > 0 {
            let f = Tensor::from_vec(sem_rows, (sem_n, self.cfg.sem_feature_dim), dev)?.to_dtype(dtype)?;
            parts.push(self.adapter_sem.forward(&f)?);
        }
        if pix_n > 0 {
            let f = Tensor::from_vec(pix_rows, (pix_n, self.cfg.pix_feature_dim), dev)?.to_dtype(dtype)?;
            parts.push(self.adapter_pix.forward(&f)?);
        }
        if sem_n == 0 && pix_n == 0 {
            return Ok(parts.remove(0).reshape((batch.len(), t, self.cfg.dim))?);
        }
        let src: Vec<u32> = slots
            .iter()
            .map(|&(kind, k)| match kind {
                0 => k as u32,
                1 => (n + k) as u32,
                _ => (n + sem_n + k) as u32,
            })
            .collect();
        let table = Tensor::cat(&parts, 0)?;
        let gathered = table.index_select(&Tensor::from_vec(src, n, dev)?, 0)?;
        Ok(gathered.reshape((batch.len(), t, self.cfg.dim))?)
    }

    /// Runs the body on embeddings starting at absolute position `offset`;
    /// returns logits (B, T, V).
    pub fn forward_embeddings(
        &self,
        x: &Tensor,
        offset: usize,
        mut caches: Option<&mut [KvCache]>,
    ) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        if offset + t > self.cfg.context {
            return domain(format!(
                "sequence of {} tokens exceeds context {}",
                offset + t,
                self.cfg.context
            ));
        }
        let pos = self.positions.narrow(0, offset, t)?;
        let mut h = x.broadcast_add(&pos)?;
        let mask = if t > 1 {
            Some(causal_mask(t, offset + t, h.dtype(), h.device())?)
        } else {
            None
        };
        for (i, block) in self.blocks.iter().enumerate() {
            let cache = caches.as_deref_mut().map(|c| &mut c[i]);
            h = block.forward(&h, None, mask.as_ref(), cache)?;
        }
        self.head.forward(&self.norm.forward(&h)?)
    }

    pub fn forward(&self, batch: &[&MultimodalSequence]) -> Result<Tensor> {
        let x = self.embed_multimodal(batch)?;
        self.forward_embeddings(&x, 0, None)
    }

    pub fn new_caches(&self) -> Vec<KvCache> {
        vec![KvCache::default(); self.cfg.layers]
    }

    /// Mean cross-entropy of next-token prediction over supervised positions.
    pub fn next_token_loss(&self, batch: &[MultimodalSequence]) -> Result<Tensor> {
        let refs: Vec<&MultimodalSequence> = batch.iter().collect();
        let logits = self.forward(&refs)?;
        token_loss(&logits, batch, self.cfg.vocab())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "unilm".into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("config_hash".into(), self.config_hash());
        self.store.save(path, meta)
    }

    pub fn config_hash(&self) -> String {
        crate::harness::config::structural_hash(&self.cfg)
    }

    pub fn load(&self, path: &Path, allow_mismatch: bool) -> Result<()> {
        let (_, meta) = crate::nn::load_tensors(path, self.device())?;
        check_hash(&meta, &self.config_hash(), allow_mismatch, path)?;
        self.store.load(path, &[])?;
        Ok(())
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (_, meta) = crate::nn::load_tensors(path, &Device::Cpu)?;
        let cfg: ModelConfig = serde_json::from_str(
            meta.get("config")
                .ok_or_else(|| Error::Checkpoint(format!("{} has no config", path.display())))?,
        )?;
        let lm = Self::new(cfg, 0, DType::F32)?;
        lm.load(path, false)?;
        Ok(lm)
    }
}

/// Cross-entropy of `logits` (B, T, V) against each sequence's next ids.
fn token_loss(logits: &Tensor, batch: &[MultimodalSequence], vocab: usize) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (bi, seq) in batch.iter().enumerate() {
        for pos in 0..t.saturating_sub(1) {
            if !seq.loss_mask[pos + 1] {
                continue;
            }
            let label = seq.elements[pos + 1].id();
            if label as usize >= vocab {
                return domain(format!("label id {label} at position {} is outside 0..{vocab}", pos + 1));
            }
            rows.push((bi * t + pos) as u32);
            labels.push(label);
        }
    }
    if rows.is_empty() {
        return domain("no supervised positions in batch");
    }
    let dev = logits.device();
    let n = rows.len();
    let flat = logits.reshape((b * t, v))?;
    let picked = flat.index_select(&Tensor::from_vec(rows, n, dev)?, 0)?;
    let logp = log_softmax_last(&picked)?;
    let label_t = Tensor::from_vec(labels, (n, 1), dev)?;
    let nll = logp.gather(&label_t, 1)?.neg()?;
    Ok(nll.mean_all()?)
}

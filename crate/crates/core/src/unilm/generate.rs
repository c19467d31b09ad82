use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Element, FeatureBranch, InputMode, MultimodalSequence, UniLm};
use crate::dualvitok::TokenizerOutput;
use crate::error::{domain, Result};
use crate::nn::KvCache;
use crate::seqcodec::{parse, serialized_len, GrammarState, ImageTokenBlock, Legal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub cfg_scale: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub sem_h: usize,
    pub sem_w: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            cfg_scale: 2.0,
            temperature: 1.0,
            top_k: 50,
            sem_h: 4,
            sem_w: 4,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_scale >= 0.0) {
            return domain(format!("cfg scale must be non-negative, got {}", self.cfg_scale));
        }
        if !(self.temperature > 0.0) {
            return domain(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.top_k == 0 {
            return domain("top_k must be at least 1");
        }
        Ok(())
    }
}

/// `uncond + s·(cond − uncond)`; exactly `cond` at `s = 1` and exactly
/// `uncond` at `s = 0`.
pub fn cfg_logits(cond: &[f32], uncond: &[f32], s: f64) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return domain(format!(
            "logit vectors differ in length: {} vs {}",
            cond.len(),
            uncond.len()
        ));
    }
    if s == 1.0 {
        return Ok(cond.to_vec());
    }
    if s == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| (u as f64 + s * (c as f64 - u as f64)) as f32)
        .collect())
}

/// Temperature/top-k sampling restricted to `legal` ids.
pub fn sample_from_logits<R: Rng + ?Sized>(
    logits: &[f32],
    legal: &Legal,
    temperature: f64,
    top_k: usize,
    rng: &mut R,
) -> Result<u32> {
    let mut cands: Vec<(u32, f64)> = legal
        .ranges
        .iter()
        .flat_map(|r| r.clone())
        .filter(|&id| (id as usize) < logits.len())
        .map(|id| (id, logits[id as usize] as f64 / temperature))
        .filter(|(_, l)| !l.is_nan())
        .collect();
    if cands.is_empty() {
        return domain("no legal token to sample");
    }
    if cands.len() == 1 {
        return Ok(cands[0].0);
    }
    // Stable sort keeps ascending-id order among equal logits.
    cands.sort_by(|a, b| b.1.total_cmp(&a.1));
    cands.truncate(top_k.max(1));
    let max = cands[0].1;
    let weights: Vec<f64> = cands.iter().map(|(_, l)| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for ((id, _), w) in cands.iter().zip(&weights) {
        if u < *w {
            return Ok(*id);
        }
        u -= w;
    }
    Ok(cands.last().unwrap().0)
}

struct Stream {
    caches: Vec<KvCache>,
    len: usize,
    /// Logits after the last fed element; none for an empty context.
    last: Option<Vec<f32>>,
}

impl UniLm {
    fn open_stream(&self, ctx: &MultimodalSequence) -> Result<Stream> {
        let mut caches = self.new_caches();
        if ctx.is_empty() {
            return Ok(Stream {
                caches,
                len: 0,
                last: None,
            });
        }
        let x = self.embed_multimodal(&[ctx])?;
        let logits = self.forward_embeddings(&x, 0, Some(&mut caches))?;
        Ok(Stream {
            caches,
            len: ctx.len(),
            last: Some(last_logits(&logits)?),
        })
    }

    fn feed(&self, stream: &mut Stream, el: &Element) -> Result<()> {
        let seq = MultimodalSequence {
            elements: vec![el.clone()],
            loss_mask: vec![false],
            cond_span: 0..0,
        };
        let x = self.embed_multimodal(&[&seq])?;
        let logits = self.forward_embeddings(&x, stream.len, Some(&mut stream.caches))?;
        stream.len += 1;
        stream.last = Some(last_logits(&logits)?);
        Ok(())
    }

    /// Input element for a freshly generated id.
    fn element_for(&self, id: u32) -> Result<Element> {
        let layout = self.layout();
        if self.config().input_mode == InputMode::Discrete || !layout.is_vision(id) {
            return Ok(Element::Id(id));
        }
        let (branch, code) = if layout.is_sem_code(id) {
            (FeatureBranch::Semantic, id - layout.sem_offset())
        } else if layout.is_pix_code(id) {
            (FeatureBranch::Pixel, id - layout.pix_offset())
        } else {
            return Ok(Element::Id(id));
        };
        let Some(tables) = self.feature_tables() else {
            return domain("continuous-input generation needs codebook feature tables");
        };
        Ok(Element::Feature {
            id,
            branch,
            vector: tables.feature(branch, code)?,
        })
    }

    /// Samples one image block after `ctx`. The unconditional stream sees
    /// `ctx` with its condition span masked.
    pub fn generate_from_context(
        &self,
        ctx: &MultimodalSequence,
        params: &GenerationParams,
    ) -> Result<(ImageTokenBlock, Vec<u32>)> {
        params.validate()?;
        let layout = *self.layout();
        let mut state = GrammarState::with_target(layout, params.sem_h, params.sem_w)?;
        let ph = layout.pix_len(params.sem_h).unwrap_or(0);
        let pw = layout.pix_len(params.sem_w).unwrap_or(0);
        let needed = ctx.len() + serialized_len(params.sem_h, params.sem_w, ph, pw);
        if needed > self.config().context {
            return domain(format!(
                "prompt and image need {needed} positions, context is {}",
                self.config().context
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut cond = self.open_stream(ctx)?;
        let mut uncond = if params.cfg_scale != 1.0 {
            Some(self.open_stream(&ctx.unconditional(self.config().mask_id()))?)
        } else {
            None
        };
        let mut out = Vec::new();
        while !state.is_done() {
            let legal = state.legal();
            let id = match (&legal.ranges[..], &cond.last) {
                // Forced tokens need no logits, which also lets an empty
                // context start with the image marker.
                ([r], _) if r.len() == 1 => r.start,
                (_, Some(c)) => {
                    let logits = match uncond.as_ref().and_then(|u| u.last.as_ref()) {
                        Some(u) => cfg_logits(c, u, params.cfg_scale)?,
                        None => c.clone(),
                    };
                    sample_from_logits(&logits, &legal, params.temperature, params.top_k, &mut rng)?
                }
                (_, None) => return domain("generation needs a non-empty context"),
            };
            state.push(id)?;
            out.push(id);
            if state.is_done() {
                break;
            }
            let el = self.element_for(id)?;
            self.feed(&mut cond, &el)?;
            if let Some(u) = uncond.as_mut() {
                self.feed(u, &el)?;
            }
        }
        Ok((parse(&out, &layout)?, out))
    }

    pub fn generate_image(&self, prompt: &[u32], params: &GenerationParams) -> Result<ImageTokenBlock> {
        let layout = self.layout();
        if let Some(&bad) = prompt.iter().find(|&&id| id >= layout.text_vocab) {
            return domain(format!("prompt id {bad} is not a text id"));
        }
        let mut ctx = MultimodalSequence::from_ids(prompt, false);
        ctx.cond_span = 0..prompt.len();
        Ok(self.generate_from_context(&ctx, params)?.0)
    }

    /// Generates an edited image with the source's grid size; only the
    /// instruction is masked in the unconditional stream.
    pub fn edit_image(
        &self,
        source: &TokenizerOutput,
        instruction: &[u32],
        params: &GenerationParams,
    ) -> Result<ImageTokenBlock> {
        let ctx = super::edit_sequence(source, instruction, None, self.layout())?;
        let sem = &source.sem()?.indices;
        let params = GenerationParams {
            sem_h: sem.h,
            sem_w: sem.w,
            ..*params
        };
        Ok(self.generate_from_context(&ctx, &params)?.0)
    }
}

fn last_logits(logits: &Tensor) -> Result<Vec<f32>> {
    let t = logits.dim(1)?;
    Ok(logits
        .narrow(1, t - 1, 1)?
        .flatten_all()?
        .to_dtype(DType::F32)?
        .to_vec1::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcodec::VocabLayout;
    use crate::unilm::ModelConfig;

    #[test]
    fn cfg_examples() {
        assert_eq!(cfg_logits(&[2.0, 0.0], &[1.0, 0.0], 2.0).unwrap(), vec![3.0, 0.0]);
        let c = [0.3f32, -1.7, 2.2];
        let u = [1.1f32, 0.4, -0.9];
        assert_eq!(cfg_logits(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_logits(&c, &u, 0.0).unwrap(), u.to_vec());
        assert!(cfg_logits(&c, &u[..2], 1.0).is_err());
    }

    #[test]
    fn sampling_respects_legal_set_and_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [5.0f32, 4.0, 3.0, 10.0];
        let legal = Legal {
            ranges: vec![0..3],
        };
        for _ in 0..200 {
            let id = sample_from_logits(&logits, &legal, 1.0, 2, &mut rng).unwrap();
            assert!(id == 0 || id == 1);
        }
        assert_eq!(sample_from_logits(&logits, &legal, 1.0, 1, &mut rng).unwrap(), 0);
    }

    fn model() -> UniLm {
        model_with(DType::F32)
    }

    fn model_with(dtype: DType) -> UniLm {
        let layout = VocabLayout::build(10, 16, 32, 4, 4).unwrap();
        let cfg = ModelConfig {
            input_mode: InputMode::Discrete,
            ..ModelConfig::tiny(layout, 8)
        };
        UniLm::new(cfg, 3, dtype).unwrap()
    }

    #[test]
    fn generation_parses_and_pins_dims() {
        let m = model();
        for seed in 0..5 {
            let p = GenerationParams {
                sem_h: 2,
                sem_w: 3,
                seed,
                ..GenerationParams::default()
            };
            let block = m.generate_image(&[1, 2], &p).unwrap();
            assert_eq!(block.sem_dims(), (2, 3));
            assert_eq!(block.pix_dims(), (4, 6));
        }
    }

    #[test]
    fn unit_scale_equals_pure_conditional() {
        let m = model_with(DType::F64);
        let p = GenerationParams {
            cfg_scale: 1.0,
            sem_h: 2,
            sem_w: 2,
            seed: 11,
            ..GenerationParams::default()
        };
        let a = m.generate_image(&[3, 4], &p).unwrap();
        // A pure conditional sampler written against the public pieces.
        let layout = *m.layout();
        let mut state = GrammarState::with_target(layout, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ids = vec![3u32, 4];
        let mut out = Vec::new();
        while !state.is_done() {
            let seq = MultimodalSequence::from_ids(&ids, false);
            let logits = last_logits(&m.forward(&[&seq]).unwrap()).unwrap();
            let id = sample_from_logits(&logits, &state.legal(), 1.0, 50, &mut rng).unwrap();
            state.push(id).unwrap();
            out.push(id);
            ids.push(id);
        }
        assert_eq!(parse(&out, &layout).unwrap(), a);
    }

    #[test]
    fn context_overflow_detected_before_sampling() {
        let m = model();
        let p = GenerationParams {
            sem_h: 4,
            sem_w: 4,
            ..GenerationParams::default()
        };
        let prompt = vec![1u32; 200];
        let err = m.generate_image(&prompt, &p).unwrap_err().to_string();
        assert!(err.contains("context"), "{err}");
    }
}

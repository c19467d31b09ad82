//! Dual-branch image tokenizer.
//!
//! The semantic branch quantizes features of a frozen transformer backbone and
//! learns a light feature decoder; the pixel branch is a convolutional
//! encoder/decoder. At decode time the semantic code map is resampled to the
//! pixel grid and both are concatenated along channels before the fusion
//! decoder.

mod blocks;
mod noise;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use blocks::{Backbone, BackboneOut, Discriminator, PixelDecoder, PixelEncoder, SemanticDecoder};
pub use noise::{inject_noise, inject_noise_batch, NoiseKind, NoiseSpec};
pub use train::{
    evaluate, semantic_loss, EvalReport, LossReport, LossWeights, TokenizerTrainer, TrainConfig,
};

use crate::error::{domain, Error, Result};
use crate::grid::{FeatureGrid, Image, IndexGrid};
use crate::nn::{resample_nearest, space_to_channel, ParamStore};
use crate::seqcodec::{ImageTokenBlock, VocabLayout};
use crate::vq::{Codebook, QuantizedTensor, QuantizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Semantic,
    Pixel,
    Dual,
}

impl Branch {
    pub fn has_semantic(self) -> bool {
        matches!(self, Branch::Semantic | Branch::Dual)
    }

    pub fn has_pixel(self) -> bool {
        matches!(self, Branch::Pixel | Branch::Dual)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub sem_downsample: usize,
    pub pix_downsample: usize,
    pub sem_codes: usize,
    pub pix_codes: usize,
    pub code_dim: usize,
    pub quantizer: QuantizerKind,
    pub sem_feature_dim: usize,
    pub backbone_blocks: usize,
    pub backbone_heads: usize,
    pub backbone_seed: u64,
    pub sem_decoder_blocks: usize,
    pub sem_decoder_dim: usize,
    pub enc_channels: usize,
    pub dec_channels: usize,
    pub dc_block: bool,
    pub branch: Branch,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TokenizerConfig {
    /// Single-machine scale.
    pub fn desk() -> Self {
        Self {
            sem_downsample: 8,
            pix_downsample: 4,
            sem_codes: 1024,
            pix_codes: 4096,
            code_dim: 32,
            quantizer: QuantizerKind::Simvq,
            sem_feature_dim: 64,
            backbone_blocks: 2,
            backbone_heads: 4,
            backbone_seed: 0x5eed,
            sem_decoder_blocks: 2,
            sem_decoder_dim: 64,
            enc_channels: 32,
            dec_channels: 48,
            dc_block: true,
            branch: Branch::Dual,
        }
    }

    /// Full-size settings (28× semantic / 16× pixel downsampling, 32k/98k codes).
    pub fn full() -> Self {
        Self {
            sem_downsample: 28,
            pix_downsample: 16,
            sem_codes: 32_768,
            pix_codes: 98_304,
            code_dim: 32,
            quantizer: QuantizerKind::Simvq,
            sem_feature_dim: 1280,
            backbone_blocks: 2,
            backbone_heads: 16,
            backbone_seed: 0x5eed,
            sem_decoder_blocks: 4,
            sem_decoder_dim: 1280,
            enc_channels: 128,
            dec_channels: 384,
            dc_block: true,
            branch: Branch::Dual,
        }
    }

    /// Small enough to train in minutes on one CPU core.
    pub fn toy() -> Self {
        Self {
            sem_codes: 256,
            pix_codes: 512,
            sem_feature_dim: 32,
            sem_decoder_dim: 32,
            enc_channels: 16,
            dec_channels: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sem_downsample == 0 || self.pix_downsample == 0 {
            return domain("downsample factors must be positive");
        }
        if !self.pix_downsample.is_power_of_two() {
            return domain(format!(
                "pixel downsample {} must be a power of two",
                self.pix_downsample
            ));
        }
        if self.sem_codes == 0 || self.pix_codes == 0 || self.code_dim == 0 {
            return domain("codebooks must be non-empty");
        }
        if self.sem_feature_dim % self.backbone_heads != 0 {
            return domain("semantic feature dim must divide into backbone heads");
        }
        Ok(())
    }

    /// Both image dims must be multiples of this.
    pub fn multiple(&self) -> usize {
        lcm(self.sem_downsample, self.pix_downsample)
    }

    /// Pixel-grid cells per semantic-grid cell as a reduced fraction.
    pub fn pix_ratio(&self) -> (u32, u32) {
        let g = gcd(self.sem_downsample, self.pix_downsample);
        (
            (self.sem_downsample / g) as u32,
            (self.pix_downsample / g) as u32,
        )
    }

    /// Semantic and pixel grid sizes for an `h`×`w` image.
    pub fn grid_dims(&self, h: usize, w: usize) -> Result<((usize, usize), (usize, usize))> {
        let m = self.multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return domain(format!("dims must be divisible by {m}, got {h}x{w}"));
        }
        Ok((
            (h / self.sem_downsample, w / self.sem_downsample),
            (h / self.pix_downsample, w / self.pix_downsample),
        ))
    }

    pub fn layout(&self, text_vocab: u32, max_height: u32, max_width: u32) -> Result<VocabLayout> {
        VocabLayout::with_ratio(
            text_vocab,
            self.sem_codes as u32,
            self.pix_codes as u32,
            max_height,
            max_width,
            self.pix_ratio(),
        )
    }

    /// Layout able to address images up to the given pixel size.
    pub fn layout_for_pixels(&self, text_vocab: u32, max_height: u32, max_width: u32) -> Result<VocabLayout> {
        let f = self.sem_downsample as u32;
        self.layout(text_vocab, (max_height / f).max(1), (max_width / f).max(1))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Indices and pre-quantization features of one branch for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub indices: IndexGrid,
    pub features: FeatureGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerOutput {
    pub sem: Option<BranchOutput>,
    pub pix: Option<BranchOutput>,
}

impl TokenizerOutput {
    pub fn sem(&self) -> Result<&BranchOutput> {
        self.sem
            .as_ref()
            .ok_or_else(|| Error::Domain("tokenizer has no semantic branch".into()))
    }

    pub fn pix(&self) -> Result<&BranchOutput> {
        self.pix
            .as_ref()
            .ok_or_else(|| Error::Domain("tokenizer has no pixel branch".into()))
    }

    pub fn to_block(&self) -> Result<ImageTokenBlock> {
        Ok(ImageTokenBlock::new(
            self.sem()?.indices.clone(),
            self.pix()?.indices.clone(),
        ))
    }
}

/// Batched branch output inside a graph.
pub struct BranchBatch {
    /// Pre-quantization features, (B·N, D).
    pub z: Tensor,
    pub q: QuantizedTensor,
    pub grid: (usize, usize),
}

pub struct EncodedBatch {
    pub backbone: BackboneOut,
    pub sem: Option<BranchBatch>,
    pub pix: Option<BranchBatch>,
    pub batch: usize,
}

/// Parameter namespaces of a tokenizer checkpoint.
pub const NS_BACKBONE: &str = "semantic_backbone";
pub const NS_SEM_PROJ: &str = "semantic_proj";
pub const NS_SEM_DECODER: &str = "semantic_decoder";
pub const NS_PIX_ENCODER: &str = "pixel_encoder";
pub const NS_PIX_DECODER: &str = "pixel_decoder";
pub const NS_CODEBOOK_SEM: &str = "codebook_sem";
pub const NS_CODEBOOK_PIX: &str = "codebook_pix";
pub const NS_DISCRIMINATOR: &str = "discriminator";
pub const NS_PROBE: &str = "semantic_probe";

pub struct DualTokenizer {
    cfg: TokenizerConfig,
    store: ParamStore,
    backbone: Backbone,
    sem_proj: Option<crate::nn::Linear>,
    sem_codebook: Option<Codebook>,
    sem_decoder: Option<SemanticDecoder>,
    pix_encoder: Option<PixelEncoder>,
    pix_codebook: Option<Codebook>,
    decoder: PixelDecoder,
    probe: Option<(crate::nn::Linear, SemanticDecoder)>,
    discriminator: Discriminator,
}

impl DualTokenizer {
    pub fn new(cfg: TokenizerConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.backbone_seed, dtype);
        let root = store.root();
        let backbone = Backbone::new(root.pp(NS_BACKBONE), &cfg)?;
        store.reseed(seed);
        let d = cfg.code_dim;
        let (sem_proj, sem_codebook, sem_decoder) = if cfg.branch.has_semantic() {
            (
                Some(root.pp(NS_SEM_PROJ).linear(cfg.sem_feature_dim, d, true)?),
                Some(Codebook::new(root.pp(NS_CODEBOOK_SEM), cfg.quantizer, cfg.sem_codes, d)?),
                Some(SemanticDecoder::new(root.pp(NS_SEM_DECODER), d, &cfg)?),
            )
        } else {
            (None, None, None)
        };
        let (pix_encoder, pix_codebook) = if cfg.branch.has_pixel() {
            (
                Some(PixelEncoder::new(root.pp(NS_PIX_ENCODER), &cfg)?),
                Some(Codebook::new(root.pp(NS_CODEBOOK_PIX), cfg.quantizer, cfg.pix_codes, d)?),
            )
        } else {
            (None, None)
        };
        let in_ch = match cfg.branch {
            Branch::Dual => 2 * d,
            _ => d,
        };
        let decoder = PixelDecoder::new(root.pp(NS_PIX_DECODER), in_ch, &cfg)?;
        let probe = if cfg.branch == Branch::Pixel {
            let (num, den) = cfg.pix_ratio();
            if den != 1 {
                return domain("pixel-only semantic probe needs an integral grid ratio");
            }
            let r = num as usize;
            Some((
                root.pp(NS_PROBE).pp("in").linear(d * r * r, d, true)?,
                SemanticDecoder::new(root.pp(NS_PROBE), d, &cfg)?,
            ))
        } else {
            None
        };
        let discriminator = Discriminator::new(root.pp(NS_DISCRIMINATOR), cfg.enc_channels)?;
        Ok(Self {
            cfg,
            store,
            backbone,
            sem_proj,
            sem_codebook,
            sem_decoder,
            pix_encoder,
            pix_codebook,
            decoder,
            probe,
            discriminator,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn sem_codebook(&self) -> Option<&Codebook> {
        self.sem_codebook.as_ref()
    }

    pub fn pix_codebook(&self) -> Option<&Codebook> {
        self.pix_codebook.as_ref()
    }

    pub(crate) fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    /// Names of parameters the generator optimizer may update.
    pub fn generator_param_names(&self) -> Vec<String> {
        let mut frozen: Vec<String> = vec![NS_BACKBONE.into(), NS_DISCRIMINATOR.into()];
        for (ns, cb) in [
            (NS_CODEBOOK_SEM, &self.sem_codebook),
            (NS_CODEBOOK_PIX, &self.pix_codebook),
        ] {
            if let Some(cb) = cb {
                if cb.kind() == QuantizerKind::Simvq {
                    frozen.push(format!("{ns}.base"));
                }
            }
        }
        self.store
            .names()
            .into_iter()
            .filter(|n| !frozen.iter().any(|f| n.starts_with(f.as_str())))
            .collect()
    }

    pub fn images_to_tensor(&self, images: &[Image]) -> Result<Tensor> {
        Image::batch_to_tensor(images, self.dtype(), self.store.device())
    }

    /// Runs both encoders and quantizers on a (B, 3, H, W) batch.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<EncodedBatch> {
        let (b, _, h, w) = x.dims4()?;
        let ((sh, sw), (ph, pw)) = self.cfg.grid_dims(h, w)?;
        let backbone = self.backbone.forward(x)?;
        let sem = match (&self.sem_proj, &self.sem_codebook) {
            (Some(proj), Some(cb)) => {
                let feats = backbone.features.detach();
                let z = proj.forward(&feats)?.reshape((b * sh * sw, self.cfg.code_dim))?;
                let q = cb.quantize_tensor(&z)?;
                Some(BranchBatch {
                    z,
                    q,
                    grid: (sh, sw),
                })
            }
            _ => None,
        };
        let pix = match (&self.pix_encoder, &self.pix_codebook) {
            (Some(enc), Some(cb)) => {
                let map = enc.forward(x)?;
                let z = map
                    .permute((0, 2, 3, 1))?
                    .reshape((b * ph * pw, self.cfg.code_dim))?;
                let q = cb.quantize_tensor(&z)?;
                Some(BranchBatch {
                    z,
                    q,
                    grid: (ph, pw),
                })
            }
            _ => None,
        };
        Ok(EncodedBatch {
            backbone,
            sem,
            pix,
            batch: b,
        })
    }

    pub fn encode(&self, image: &Image) -> Result<TokenizerOutput> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Vec<TokenizerOutput>> {
        let x = self.images_to_tensor(images)?;
        let enc = self.encode_tensor(&x)?;
        let split = |bb: &Option<BranchBatch>| -> Result<Vec<Option<BranchOutput>>> {
            let Some(bb) = bb else {
                return Ok(vec![None; enc.batch]);
            };
            let (gh, gw) = bb.grid;
            let n = gh * gw;
            let z = bb.z.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            (0..enc.batch)
                .map(|i| {
                    let feats: Vec<f32> = z[i * n..(i + 1) * n].concat();
                    Ok(Some(BranchOutput {
                        indices: IndexGrid::new(gh, gw, bb.q.indices[i * n..(i + 1) * n].to_vec())?,
                        features: FeatureGrid::new(gh, gw, self.cfg.code_dim, feats)?,
                    }))
                })
                .collect()
        };
        let sem = split(&enc.sem)?;
        let pix = split(&enc.pix)?;
        Ok(sem
            .into_iter()
            .zip(pix)
            .map(|(sem, pix)| TokenizerOutput { sem, pix })
            .collect())
    }

    /// (B, D, h, w) code map from per-sample index grids.
    fn code_map(cb: &Codebook, grids: &[&IndexGrid]) -> Result<Tensor> {
        let (h, w) = (grids[0].h, grids[0].w);
        let ids: Vec<u32> = grids.iter().flat_map(|g| g.data.iter().copied()).collect();
        let codes = cb.lookup(&ids)?;
        Ok(codes
            .reshape((grids.len(), h, w, cb.dim()))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// Builds the fusion-decoder input from (B, D, ·, ·) code maps.
    pub(crate) fn decoder_input(
        &self,
        sem_map: Option<&Tensor>,
        pix_map: Option<&Tensor>,
        pix_grid: (usize, usize),
    ) -> Result<Tensor> {
        let (ph, pw) = pix_grid;
        match (self.cfg.branch, sem_map, pix_map) {
            (Branch::Dual, Some(s), Some(p)) => {
                let s = resample_nearest(s, ph, pw)?;
                Ok(Tensor::cat(&[p, &s], 1)?)
            }
            (Branch::Semantic, Some(s), _) => resample_nearest(s, ph, pw),
            (Branch::Pixel, _, Some(p)) => Ok(p.clone()),
            _ => domain("decoder input lacks a required branch"),
        }
    }

    /// Decodes index grids to an image in `[0, 1]`.
    pub fn decode(&self, sem: Option<&IndexGrid>, pix: Option<&IndexGrid>) -> Result<Image> {
        let pix_grid = self.check_grids(sem, pix)?;
        let sem_map = match (sem, &self.sem_codebook) {
            (Some(g), Some(cb)) => Some(Self::code_map(cb, &[g])?),
            _ => None,
        };
        let pix_map = match (pix, &self.pix_codebook) {
            (Some(g), Some(cb)) => Some(Self::code_map(cb, &[g])?),
            _ => None,
        };
        let input = self.decoder_input(sem_map.as_ref(), pix_map.as_ref(), pix_grid)?;
        let out = self.decoder.forward(&input)?;
        Ok(Image::batch_from_tensor(&out)?.remove(0))
    }

    pub fn decode_block(&self, block: &ImageTokenBlock) -> Result<Image> {
        self.decode(Some(&block.sem_indices), Some(&block.pix_indices))
    }

    /// Validates grid presence and shape consistency; returns the pixel grid size.
    fn check_grids(&self, sem: Option<&IndexGrid>, pix: Option<&IndexGrid>) -> Result<(usize, usize)> {
        let (num, den) = self.cfg.pix_ratio();
        let scale = |n: usize| -> Option<usize> {
            let s = n * num as usize;
            (s % den as usize == 0).then(|| s / den as usize)
        };
        match (self.cfg.branch, sem, pix) {
            (Branch::Dual, Some(s), Some(p)) => {
                if scale(s.h) != Some(p.h) || scale(s.w) != Some(p.w) {
                    return domain(format!(
                        "semantic grid {}x{} and pixel grid {}x{} do not describe one image",
                        s.h, s.w, p.h, p.w
                    ));
                }
                Ok((p.h, p.w))
            }
            (Branch::Semantic, Some(s), _) => match (scale(s.h), scale(s.w)) {
                (Some(h), Some(w)) => Ok((h, w)),
                _ => domain(format!("semantic grid {}x{} has no pixel counterpart", s.h, s.w)),
            },
            (Branch::Pixel, _, Some(p)) => Ok((p.h, p.w)),
            (b, _, _) => domain(format!("{b:?} tokenizer is missing a required grid")),
        }
    }

    /// Semantic-feature reconstruction from quantized codes, (B, N, D_sem).
    pub(crate) fn reconstruct_semantic(
        &self,
        enc: &EncodedBatch,
        sem_codes: Option<&Tensor>,
        pix_codes: Option<&Tensor>,
    ) -> Result<Option<Tensor>> {
        let b = enc.batch;
        if let (Some(dec), Some(sem), Some(codes)) = (&self.sem_decoder, &enc.sem, sem_codes) {
            let (sh, sw) = sem.grid;
            let x = codes.reshape((b, sh * sw, self.cfg.code_dim))?;
            return Ok(Some(dec.forward(&x, sh, sw)?));
        }
        if let (Some((proj, dec)), Some(pix), Some(codes)) = (&self.probe, &enc.pix, pix_codes) {
            let (ph, pw) = pix.grid;
            let r = self.cfg.pix_ratio().0 as usize;
            let map = codes
                .detach()
                .reshape((b, ph, pw, self.cfg.code_dim))?
                .permute((0, 3, 1, 2))?;
            let folded = space_to_channel(&map, r)?;
            let (sh, sw) = (ph / r, pw / r);
            let tokens = folded
                .reshape((b, self.cfg.code_dim * r * r, sh * sw))?
                .transpose(1, 2)?;
            return Ok(Some(dec.forward(&proj.forward(&tokens)?, sh, sw)?));
        }
        Ok(None)
    }

    pub(crate) fn decoder(&self) -> &PixelDecoder {
        &self.decoder
    }

    /// Structural fingerprint of the configuration.
    pub fn config_hash(&self) -> String {
        crate::harness::config::structural_hash(&self.cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "tokenizer".into());
        meta.insert("quantizer".into(), self.cfg.quantizer.tag().into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("config_hash".into(), self.config_hash());
        self.store.save(path, meta)
    }

    /// Loads weights; the checkpoint's structural hash must match unless
    /// `allow_mismatch` is set.
    pub fn load(&self, path: &Path, allow_mismatch: bool) -> Result<()> {
        let (_, meta) = crate::nn::load_tensors(path, self.store.device())?;
        check_hash(&meta, &self.config_hash(), allow_mismatch, path)?;
        self.store.load(path, &[])?;
        Ok(())
    }

    /// Reads the configuration stored in a checkpoint and rebuilds the model.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (_, meta) = crate::nn::load_tensors(path, &candle_core::Device::Cpu)?;
        let cfg: TokenizerConfig = serde_json::from_str(
            meta.get("config")
                .ok_or_else(|| Error::Checkpoint(format!("{} has no config", path.display())))?,
        )?;
        let tok = Self::new(cfg, 0, DType::F32)?;
        tok.load(path, false)?;
        Ok(tok)
    }
}

pub(crate) fn check_hash(
    meta: &BTreeMap<String, String>,
    expected: &str,
    allow_mismatch: bool,
    path: &Path,
) -> Result<()> {
    match meta.get("config_hash") {
        Some(h) if h == expected => Ok(()),
        _ if allow_mismatch => Ok(()),
        Some(h) => Err(Error::Checkpoint(format!(
            "{}: config hash {h} differs from current {expected}",
            path.display()
        ))),
        None => Err(Error::Checkpoint(format!(
            "{}: no config hash recorded",
            path.display()
        ))),
    }
}

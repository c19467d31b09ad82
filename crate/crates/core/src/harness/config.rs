//! Configuration files and structural hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{ParamGroup, ResolutionMode, StagePlan};
use crate::diffusion::{CondMaskSpec, DiffusionConfig};
use crate::dualvitok::{TokenizerConfig, TrainConfig};
use crate::error::{domain, Error, Result};
use crate::unilm::InputMode;

/// Hex prefix of the SHA-256 of a value's canonical JSON form (sorted keys).
pub fn structural_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value)
        .map(|v| v.to_string())
        .unwrap_or_default();
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(&digest[..8])
}

/// Stages of the training pipeline, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "tokenizer")]
    Tokenizer,
    #[serde(rename = "diffusion")]
    Diffusion,
    #[serde(rename = "mllm-1")]
    Mllm1,
    #[serde(rename = "mllm-2a")]
    Mllm2a,
    #[serde(rename = "mllm-2b")]
    Mllm2b,
    #[serde(rename = "mllm-3")]
    Mllm3,
}

impl StageId {
    pub const ALL: [StageId; 6] = [
        StageId::Tokenizer,
        StageId::Diffusion,
        StageId::Mllm1,
        StageId::Mllm2a,
        StageId::Mllm2b,
        StageId::Mllm3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageId::Tokenizer => "tokenizer",
            StageId::Diffusion => "diffusion",
            StageId::Mllm1 => "mllm-1",
            StageId::Mllm2a => "mllm-2a",
            StageId::Mllm2b => "mllm-2b",
            StageId::Mllm3 => "mllm-3",
        }
    }

    /// The stage whose checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<StageId> {
        match self {
            StageId::Tokenizer => None,
            StageId::Diffusion | StageId::Mllm1 => Some(StageId::Tokenizer),
            StageId::Mllm2a => Some(StageId::Mllm1),
            StageId::Mllm2b => Some(StageId::Mllm2a),
            StageId::Mllm3 => Some(StageId::Mllm2b),
        }
    }

    pub fn is_lm(self) -> bool {
        matches!(self, StageId::Mllm1 | StageId::Mllm2a | StageId::Mllm2b | StageId::Mllm3)
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Side of the square toy images used for tokenizer and diffusion training.
    pub image_size: usize,
    pub train_images: usize,
    pub eval_images: usize,
    /// Number of caption/image samples per language-model stage.
    pub lm_samples: usize,
    pub edit_triples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            train_images: 256,
            eval_images: 32,
            lm_samples: 64,
            edit_triples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub context: usize,
    pub mlp_ratio: usize,
    pub input_mode: InputMode,
    /// Largest image side the vocabulary must address.
    pub max_image_side: u32,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            context: 256,
            mlp_ratio: 2,
            input_mode: InputMode::Continuous,
            max_image_side: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmStageSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub uncond_prob: f64,
    pub mode: ResolutionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmTrainSection {
    pub stage1: LmStageSchedule,
    pub stage2a: LmStageSchedule,
    pub stage2b: LmStageSchedule,
    pub stage3: LmStageSchedule,
}

impl Default for LmTrainSection {
    fn default() -> Self {
        let s = |steps, mode| LmStageSchedule {
            steps,
            batch_size: 8,
            lr: 2e-3,
            uncond_prob: 0.1,
            mode,
        };
        Self {
            stage1: s(60, ResolutionMode::Fixed { size: 16 }),
            stage2a: s(60, ResolutionMode::Fixed { size: 16 }),
            stage2b: s(60, ResolutionMode::Fixed { size: 32 }),
            stage3: s(60, ResolutionMode::Anyres { budget: 1024 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub width: usize,
    pub levels: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            timesteps: 50,
            width: 16,
            levels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask: CondMaskSpec,
}

impl Default for DiffusionTrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 2e-3,
            mask: CondMaskSpec::default(),
        }
    }
}

/// Everything one run needs. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_device")]
    pub device: String,
    pub out_dir: PathBuf,
    pub stages: Vec<StageId>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "TokenizerConfig::toy")]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub tokenizer_train: TrainConfig,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub lm_train: LmTrainSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub diffusion_train: DiffusionTrainSection,
}

fn default_device() -> String {
    "cpu".into()
}

impl RunConfig {
    /// Small all-stage configuration writing to `out_dir`.
    pub fn toy(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            device: default_device(),
            out_dir: out_dir.into(),
            stages: StageId::ALL.to_vec(),
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::toy(),
            tokenizer_train: TrainConfig::default(),
            lm: LmSection::default(),
            lm_train: LmTrainSection::default(),
            diffusion: DiffusionSection::default(),
            diffusion_train: DiffusionTrainSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device {:?}; only cpu is built in", self.device)));
        }
        self.tokenizer.validate()?;
        let m = self.tokenizer.multiple();
        if self.data.image_size == 0 || self.data.image_size % m != 0 {
            return domain(format!("data.image_size must be a positive multiple of {m}"));
        }
        for plan in self.stage_plans() {
            plan.validate()?;
        }
        Ok(())
    }

    pub fn diffusion_config(&self) -> DiffusionConfig {
        DiffusionConfig {
            levels: self.diffusion.levels,
            ..DiffusionConfig::with_steps(
                self.diffusion.timesteps,
                self.diffusion.width,
                self.tokenizer.pix_downsample,
                self.tokenizer.code_dim,
            )
        }
    }

    /// Language-model stage schedule for `id`, if it is one.
    pub fn lm_schedule(&self, id: StageId) -> Option<&LmStageSchedule> {
        match id {
            StageId::Mllm1 => Some(&self.lm_train.stage1),
            StageId::Mllm2a => Some(&self.lm_train.stage2a),
            StageId::Mllm2b => Some(&self.lm_train.stage2b),
            StageId::Mllm3 => Some(&self.lm_train.stage3),
            _ => None,
        }
    }

    /// Trainable groups and resolution policy of each language-model stage.
    pub fn stage_plans(&self) -> Vec<StagePlan> {
        [StageId::Mllm1, StageId::Mllm2a, StageId::Mllm2b, StageId::Mllm3]
            .into_iter()
            .map(|id| self.stage_plan(id).expect("lm stage"))
            .collect()
    }

    pub fn stage_plan(&self, id: StageId) -> Option<StagePlan> {
        let sched = self.lm_schedule(id)?;
        let vision = vec![ParamGroup::Adapters, ParamGroup::VisionEmbeddings, ParamGroup::VisionHead];
        let trainable = match id {
            StageId::Mllm1 => vision,
            StageId::Mllm2a | StageId::Mllm2b => [vision, vec![ParamGroup::Body]].concat(),
            _ => [
                vision,
                vec![ParamGroup::Body, ParamGroup::TextEmbeddings, ParamGroup::TextHead],
            ]
            .concat(),
        };
        Some(StagePlan {
            id: id.name().into(),
            mode: sched.mode,
            trainable,
        })
    }

    pub fn hash(&self) -> String {
        structural_hash(self)
    }
}

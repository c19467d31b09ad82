//! Dual-branch image tokenizer, coarse-to-fine token grammar, unified
//! autoregressive generator and token-conditioned diffusion decoder, with a
//! small-scale training and ablation harness.

pub mod datapipe;
pub mod diffusion;
pub mod dualvitok;
pub mod error;
pub mod grid;
pub mod harness;
pub mod nn;
pub mod seqcodec;
pub mod unilm;
pub mod vq;

pub use error::{Error, Result};
pub use grid::{FeatureGrid, Image, IndexGrid};
pub use seqcodec::{ImageTokenBlock, VocabLayout};
pub use vq::{Codebook, QuantizerKind};

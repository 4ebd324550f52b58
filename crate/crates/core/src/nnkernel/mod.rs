//! Minimal decoder-only transformer with hand-written reverse-mode gradients.
//!
//! Pre-norm GPT-2 style blocks (GELU MLP, learned positions, untied
//! unembedding with bias). Besides the plain causal forward pass the model
//! supports latent feedback: positions holding the latent placeholder take
//! the projected final-layer residual of the previous position as their
//! input embedding, computed left to right.

mod backward;
pub mod checkpoint;
mod forward;
pub mod loss;
pub mod ops;
pub mod optim;
mod params;
pub mod scalar;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::Vocabulary;

pub use forward::{
    ActivationCache, Depth, ForwardMode, ForwardOptions, ForwardOutput, Patch, TokenBatch,
};
pub use loss::{
    loss_and_grads, loss_value, predict_answers, DistillDepths, DistillNormalizer, LossBreakdown, LossConfig,
    LossWeights, PairedBatch, SeqBatch,
};
pub use optim::{clip_global_norm, lr_at, AdamW, AdamWConfig, LrSchedule};
pub use checkpoint::CheckpointHeader;
pub use params::{LayerParams, Model, ParamEntry, ParamKind, ParamLayout};
pub use scalar::Scalar;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub latent_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 3,
            heads: 2,
            d_model: 256,
            context_length: 64,
            vocab_size: Vocabulary::SIZE,
            latent_steps: 6,
        }
    }
}

impl ModelConfig {
    /// One-layer, width-8 model used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            context_length: 24,
            vocab_size: Vocabulary::SIZE,
            latent_steps: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 {
            return Err(Error::Config("layers, heads and d_model must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < Vocabulary::SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the task vocabulary {}",
                self.vocab_size,
                Vocabulary::SIZE
            )));
        }
        if self.context_length == 0 {
            return Err(Error::Config("context_length must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Residual depths: `L1-Pre` plus one after each layer.
    pub fn depths(&self) -> usize {
        self.layers + 1
    }
}

//! A small pre-norm decoder-only transformer: RMS normalization, rotary
//! positions, gated (SwiGLU) feedforward, untied input and output embeddings.
//!
//! Every forward pass can be traced ([`ForwardTrace`]) and intervened on
//! ([`Intervention`]); the backward pass is written out by hand so the model
//! trains without any autodiff dependency.

mod backward;
mod checkpoint;
mod forward;
mod generate;
mod train;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, GradScope};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{forward, forward_cached, ForwardCache, ForwardTrace, Intervention};
pub use generate::generate;
pub(crate) use train::{clip_grad_norm, sample_batch, AdamW};
pub use train::{cross_entropy, evaluate_loss, loss_and_grad, train, train_from, TrainHyper, TrainReport};
pub use weights::{LayerWeights, Model, ModelWeights};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModelConfig(msg));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "head dim {} must be even for rotary encoding",
                self.head_dim()
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad(format!("rope_base {} must be > 1", self.rope_base));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.d_ff;
        2 * self.vocab_size * d + self.n_layers * per_layer + d
    }
}

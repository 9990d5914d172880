//! Decoder-only transformer: RMSNorm pre-norm blocks, QK-Norm, RoPE, SwiGLU,
//! untied output head. Training math is in `f64` with hand-written backward.

mod checkpoint;
mod forward;
pub(crate) mod linalg;
mod params;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{apply_rope, backward, forward, loss, loss_and_grad, KvCache};
pub use params::{ModelParams, TensorInfo};
pub use train::{
    lr_at, train, write_loss_csv, AdamW, LossRecord, TrainConfig, TrainExample, TrainOutcome,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// SwiGLU hidden width; 0 means 8/3·dim rounded to a multiple of 8.
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 128,
            heads: 4,
            hidden: 0,
            vocab_size: 0,
            max_seq_len: 192,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            let raw = 8.0 * self.dim as f64 / 3.0;
            (((raw / 8.0).round() as usize) * 8).max(8)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.layers == 0 || self.dim == 0 || self.heads == 0 {
            return bad("layers, dim and heads must be positive");
        }
        if self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.head_dim() % 2 != 0 {
            return bad("head_dim must be even for rotary embeddings");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size is unset");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive");
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) {
            return bad("rope_base must exceed 1 and norm_eps must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hidden_width() {
        let c = ModelConfig::default();
        assert_eq!(c.hidden_dim(), 344);
        assert_eq!(c.head_dim(), 32);
        assert!(c.validate().is_err());
        assert!(ModelConfig { vocab_size: 100, ..c.clone() }.validate().is_ok());
        assert!(ModelConfig { vocab_size: 100, heads: 3, ..c }.validate().is_err());
    }
}

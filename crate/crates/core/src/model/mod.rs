//! Toy decoder-only transformer: pre-norm blocks, rotary attention,
//! untied output projection, and an additive countdown encoding at the
//! input embedding layer.

mod cache;
pub mod checkpoint;
mod forward;
mod params;

pub use cache::KvCache;
pub use forward::{build_logits, build_logits_scaled, forward, forward_scaled, ParamVars};
pub use params::{LayerParams, Parameters};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::EncodingError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    Vocabulary { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("plan covers {plan} positions but sequence has {tokens}")]
    PlanMismatch { plan: usize, tokens: usize },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq: 512,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return bad("all sizes must be positive".into());
        }
        if self.d_model % (2 * self.n_heads) != 0 {
            return bad(format!(
                "d_model {} must be divisible by 2 * n_heads = {}",
                self.d_model,
                2 * self.n_heads
            ));
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        if tokens.len() > self.max_seq {
            return Err(ModelError::Length {
                len: tokens.len(),
                max: self.max_seq,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(ModelError::Vocabulary {
                id: id as usize,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// Rotates each adjacent pair `(x[2j], x[2j+1])` of a single head vector
/// by `position / base^(2j / head_dim)`.
pub fn rope_rotate<T: crate::tensor::Scalar>(x: &[T], position: usize, base: f64) -> Result<Vec<T>, TensorError> {
    if x.is_empty() || x.len() % 2 != 0 {
        return Err(TensorError::OddHeadDim(x.len()));
    }
    let mut out = x.to_vec();
    crate::tensor::kernels::rope_rows(&mut out, x.len(), &[position], x.len(), base, false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_split_pairs() {
        let cfg = ModelConfig {
            d_model: 12,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = [0.3f64, -1.2, 2.0, 0.5];
        assert_eq!(rope_rotate(&x, 0, 10_000.0).unwrap(), x.to_vec());
    }

    #[test]
    fn rope_odd_dimension_is_rejected() {
        assert!(rope_rotate(&[1.0f32, 2.0, 3.0], 4, 10_000.0).is_err());
    }
}

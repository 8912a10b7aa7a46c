//! A micro transformer encoder with MLM, token- and sequence-classification
//! heads, parameter-group tagging, and deterministic initialization.

mod batch;
mod head;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::NumericError;
use crate::param::{GroupTag, ParamError};

pub use batch::{mlm_corrupt, Batch, Labels, MlmBatch};
pub use head::{init_head, HeadKind, HeadSpec};
pub use transformer::{ForwardOptions, LossAndGrad, Predictions, TransformerModel};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
/// First id available to real vocabulary.
pub const FIRST_REGULAR: u32 = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub tie_output_embedding: bool,
}

impl Default for ModelSpec {
    /// Desk-scale default, about 0.14M parameters.
    fn default() -> Self {
        ModelSpec {
            vocab_size: 512,
            hidden_size: 64,
            layers: 2,
            heads: 4,
            ffn_size: 128,
            max_seq_len: 32,
            tie_output_embedding: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_size", self.ffn_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Spec(format!("{} must be at least 1", name)));
        }
        if !self.hidden_size.is_multiple_of(self.heads) {
            return Err(ModelError::Spec(format!(
                "hidden_size {} not divisible by heads {}",
                self.hidden_size, self.heads
            )));
        }
        if self.vocab_size <= FIRST_REGULAR as usize {
            return Err(ModelError::Spec(
                "vocabulary has no room past special tokens".into(),
            ));
        }
        Ok(())
    }

    /// Tensor names and shapes of the body (no task head).
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, h, f) = (self.vocab_size, self.hidden_size, self.ffn_size);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![v, h]),
            ("embeddings.position".to_string(), vec![self.max_seq_len, h]),
            ("embeddings.norm.gamma".to_string(), vec![h]),
            ("embeddings.norm.beta".to_string(), vec![h]),
            ("mlm.decoder.bias".to_string(), vec![v]),
        ];
        if !self.tie_output_embedding {
            out.push(("mlm.decoder.weight".to_string(), vec![v, h]));
        }
        for l in 0..self.layers {
            let p = format!("layer{}", l);
            for proj in ["query", "key", "value", "output"] {
                out.push((format!("{p}.attention.{proj}.weight"), vec![h, h]));
                out.push((format!("{p}.attention.{proj}.bias"), vec![h]));
            }
            out.push((format!("{p}.attention.norm.gamma"), vec![h]));
            out.push((format!("{p}.attention.norm.beta"), vec![h]));
            out.push((format!("{p}.ffn.up.weight"), vec![h, f]));
            out.push((format!("{p}.ffn.up.bias"), vec![f]));
            out.push((format!("{p}.ffn.down.weight"), vec![f, h]));
            out.push((format!("{p}.ffn.down.bias"), vec![h]));
            out.push((format!("{p}.ffn.norm.gamma"), vec![h]));
            out.push((format!("{p}.ffn.norm.beta"), vec![h]));
        }
        out
    }
}

/// The single group a parameter name belongs to.
pub fn group_of(name: &str) -> GroupTag {
    if name.starts_with("head.") {
        GroupTag::Head
    } else if name.starts_with("mlm.decoder.") {
        GroupTag::OutputEmbedding
    } else if name.starts_with("embeddings.") && !name.contains(".norm.") {
        GroupTag::InputEmbedding
    } else if name.contains(".norm.") {
        GroupTag::LayerNorm
    } else if name.ends_with(".bias") {
        GroupTag::Bias
    } else if name.contains(".attention.") {
        GroupTag::Attention
    } else {
        GroupTag::Ffn
    }
}

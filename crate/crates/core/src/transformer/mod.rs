//! The underlying encoder-decoder transformer with injection points for
//! adapters, prefixes, LoRA factors and fused instruction states.
//!
//! Blocks are pre-norm with RMS normalization and learned absolute positions.
//! Prefix tokens and fused states receive no positional embedding.

mod adaptation;
pub mod attention;
mod config;
mod model;

pub use adaptation::{
    Adapter, AdapterVars, LayerAdaptation, LayerVars, Lora, LoraPair, LoraVars, Prefix, PrefixVars,
};
pub use attention::{attention, attention_with_weights};
pub use config::ModelConfig;
pub use model::{
    argmax, teacher_forcing, AttentionParams, DecoderLayerParams, EncoderLayerParams,
    FeedForwardParams, Transformer,
};
pub(crate) use model::{normal_tensor, ones, NORM_EPS};

use crate::numerics::Tensor;

/// Encoder states for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `seq × d`
    pub states: Tensor,
    pub token_mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn new(states: Tensor) -> Self {
        let rows = states.dims2().0;
        Self {
            states,
            token_mask: vec![true; rows],
        }
    }

    pub fn len(&self) -> usize {
        self.token_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_mask.is_empty()
    }
}

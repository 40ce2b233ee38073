use serde::{Deserialize, Serialize};

use crate::corpus::tokenizer::VOCAB_SIZE;
use crate::error::{HintError, Result};

/// Architecture hyperparameters of the underlying encoder-decoder and of the
/// parameter-efficient modules injected into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Layers per stack (the encoder and the decoder each have this many).
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub adapter_bottleneck: usize,
    pub prefix_length: usize,
    /// Width of the generator embeddings; always equal to `model_dim`.
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-sized default: 2+2 layers, d=64, 4 heads of 16.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 4,
            head_dim: 16,
            ffn_dim: 128,
            vocab_size: VOCAB_SIZE,
            adapter_bottleneck: 32,
            prefix_length: 8,
            embed_dim: 64,
            max_seq_len: 512,
            lora_rank: 8,
        }
    }

    /// Small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            model_dim: 8,
            heads: 2,
            head_dim: 4,
            ffn_dim: 12,
            vocab_size: VOCAB_SIZE,
            adapter_bottleneck: 3,
            prefix_length: 2,
            embed_dim: 8,
            max_seq_len: 96,
            lora_rank: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("adapter_bottleneck", self.adapter_bottleneck),
            ("prefix_length", self.prefix_length),
            ("embed_dim", self.embed_dim),
            ("max_seq_len", self.max_seq_len),
            ("lora_rank", self.lora_rank),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(HintError::Config(format!("{name} must be at least 1")));
        }
        if self.heads * self.head_dim != self.model_dim {
            return Err(HintError::Config(format!(
                "heads × head_dim = {} × {} must equal model_dim {}",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        if self.embed_dim != self.model_dim {
            return Err(HintError::Config(format!(
                "embed_dim {} must equal model_dim {}",
                self.embed_dim, self.model_dim
            )));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(HintError::Config(format!(
                "vocab_size {} is smaller than the byte vocabulary {VOCAB_SIZE}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Total layers across both stacks.
    pub fn total_layers(&self) -> usize {
        2 * self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn head_product_must_match() {
        let mut c = ModelConfig::desk();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(HintError::Config(_))));
        let mut c = ModelConfig::desk();
        c.embed_dim = 32;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.prefix_length = 0;
        assert!(c.validate().is_err());
    }
}

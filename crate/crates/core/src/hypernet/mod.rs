//! The hypernetwork: instruction encoding with the tied encoder, module
//! generation, and the cached per-task context.

mod context;
mod generator;
mod index;

pub use context::TaskContext;
pub use generator::{peft_from_vars, GeneratorAttention, GeneratorBank, GeneratorMlp};
pub use index::{Block, Family, IndexMap, Slot};

use serde::{Deserialize, Serialize};

use crate::peft::PeftKinds;

/// Which generated pieces a HINT model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintVariant {
    pub kinds: PeftKinds,
    /// Concatenate the encoded instruction with the encoded input as the
    /// decoder's cross-attention source.
    pub fusion: bool,
}

impl HintVariant {
    pub const FULL: HintVariant = HintVariant {
        kinds: PeftKinds::ADAPTERS_PREFIXES,
        fusion: true,
    };
}

//! The cached per-task artifact and its on-disk form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};
use crate::io::Container;
use crate::numerics::Tensor;
use crate::peft::{PeftKinds, PeftSet};
use crate::transformer::ModelConfig;

/// Generated modules plus the encoded instruction for one task.
///
/// Built once per task and reused for every instance of that task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskContext {
    pub task_id: String,
    pub instruction_tokens: Vec<u32>,
    /// `t × d`, one row per instruction token.
    pub encoded_instruction: Tensor,
    pub peft: PeftSet,
    /// Fingerprint of the model configuration that produced this context.
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContextMeta {
    task_id: String,
    instruction_tokens: Vec<u32>,
    kinds: PeftKinds,
    layers: usize,
    encoder_layers: usize,
    fingerprint: String,
}

impl TaskContext {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (rows, cols) = self.encoded_instruction.dims2();
        if rows != self.instruction_tokens.len() || cols != cfg.model_dim {
            return Err(HintError::Config(format!(
                "encoded instruction is {rows}×{cols} for {} tokens at width {}",
                self.instruction_tokens.len(),
                cfg.model_dim
            )));
        }
        self.peft.validate(cfg).map_err(|e| HintError::Config(e.to_string()))
    }

    pub fn to_container(&self, cfg: &ModelConfig) -> Result<Container> {
        let meta = ContextMeta {
            task_id: self.task_id.clone(),
            instruction_tokens: self.instruction_tokens.clone(),
            kinds: self.peft.kinds,
            layers: self.peft.per_layer.len(),
            encoder_layers: cfg.layers,
            fingerprint: self.fingerprint.clone(),
        };
        let mut c = Container::new("task-context", serde_json::to_value(meta)?);
        c.push("encoded_instruction", self.encoded_instruction.clone());
        self.peft.push_arrays(&mut c, "peft.");
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind("task-context")?;
        let meta: ContextMeta = serde_json::from_value(c.meta.clone())?;
        let encoded_instruction = c.take("encoded_instruction")?;
        let peft = PeftSet::take_arrays(&mut c, "peft.", meta.layers, meta.kinds, meta.encoder_layers)?;
        Ok(Self {
            task_id: meta.task_id,
            instruction_tokens: meta.instruction_tokens,
            encoded_instruction,
            peft,
            fingerprint: meta.fingerprint,
        })
    }

    pub fn save(&self, path: &Path, cfg: &ModelConfig) -> Result<()> {
        self.to_container(cfg)?.save(path)
    }

    /// Loads a context and checks it was produced under `fingerprint`.
    pub fn load(path: &Path, fingerprint: &str) -> Result<Self> {
        let ctx = Self::from_container(Container::load(path)?)?;
        if ctx.fingerprint != fingerprint {
            return Err(HintError::Version(format!(
                "task context {} was built by model {}, current model is {fingerprint}",
                ctx.task_id, ctx.fingerprint
            )));
        }
        Ok(ctx)
    }
}

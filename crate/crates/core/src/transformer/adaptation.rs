use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{HintError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Parallel bottleneck adapter: `down` is `d × n_a`, `up` is `n_a × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub down: Tensor,
    pub up: Tensor,
}

/// Key and value tokens prepended inside one attention module, each `p × h × k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prefix {
    pub keys: Tensor,
    pub values: Tensor,
}

impl Prefix {
    pub fn len(&self) -> usize {
        self.keys.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Low-rank pair: `a` is `d × r`, `b` is `r × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// LoRA factors on the query and value projections of self-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lora {
    pub query: LoraPair,
    pub value: LoraPair,
}

impl Lora {
    pub fn rank(&self) -> usize {
        self.query.a.shape().get(1).copied().unwrap_or(0)
    }
}

/// Everything injected into one transformer layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerAdaptation {
    pub adapter: Option<Adapter>,
    pub self_prefix: Option<Prefix>,
    /// Decoder layers only.
    pub cross_prefix: Option<Prefix>,
    pub lora: Option<Lora>,
}

impl LayerAdaptation {
    pub fn validate(&self, cfg: &ModelConfig, decoder: bool) -> Result<()> {
        let d = cfg.model_dim;
        if let Some(a) = &self.adapter {
            let n = cfg.adapter_bottleneck;
            if a.down.shape() != [d, n] || a.up.shape() != [n, d] {
                return Err(HintError::Shape(format!(
                    "adapter down {:?} / up {:?} do not match d={d}, n_a={n}",
                    a.down.shape(),
                    a.up.shape()
                )));
            }
        }
        for p in [&self.self_prefix, &self.cross_prefix].into_iter().flatten() {
            let len = p.len();
            let want = [len, cfg.heads, cfg.head_dim];
            if p.keys.shape() != want || p.values.shape() != want {
                return Err(HintError::Shape(format!(
                    "prefix keys {:?} / values {:?} must be [p, {}, {}]",
                    p.keys.shape(),
                    p.values.shape(),
                    cfg.heads,
                    cfg.head_dim
                )));
            }
            // Zero-length prefixes are the explicit "no prefix" value.
            if len != 0 && len != cfg.prefix_length {
                return Err(HintError::Shape(format!(
                    "prefix has {len} tokens, config prefix_length is {}",
                    cfg.prefix_length
                )));
            }
        }
        if !decoder && self.cross_prefix.is_some() {
            return Err(HintError::Shape("encoder layers have no cross-attention prefix".into()));
        }
        if let Some(l) = &self.lora {
            let r = l.rank();
            if r == 0 {
                return Err(HintError::Shape("LoRA rank must be at least 1".into()));
            }
            for pair in [&l.query, &l.value] {
                if pair.a.shape() != [d, r] || pair.b.shape() != [r, d] {
                    return Err(HintError::Shape(format!(
                        "LoRA a {:?} / b {:?} do not match d={d}, r={r}",
                        pair.a.shape(),
                        pair.b.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Place the tensors on a tape as constants.
    pub fn to_vars<'a>(&'a self, tape: &mut Tape<'a>, cfg: &ModelConfig) -> LayerVars {
        let d = cfg.model_dim;
        let prefix = |tape: &mut Tape<'a>, p: &'a Prefix| PrefixVars {
            keys: flat(tape, &p.keys, d),
            values: flat(tape, &p.values, d),
        };
        LayerVars {
            adapter: self.adapter.as_ref().map(|a| AdapterVars {
                down: tape.constant_ref(&a.down),
                up: tape.constant_ref(&a.up),
            }),
            self_prefix: self.self_prefix.as_ref().map(|p| prefix(tape, p)),
            cross_prefix: self.cross_prefix.as_ref().map(|p| prefix(tape, p)),
            lora: self.lora.as_ref().map(|l| LoraVars {
                query: (tape.constant_ref(&l.query.a), tape.constant_ref(&l.query.b)),
                value: (tape.constant_ref(&l.value.a), tape.constant_ref(&l.value.b)),
                scaling: 1.0 / l.rank() as f64,
            }),
        }
    }
}

fn flat<'a>(tape: &mut Tape<'a>, t: &'a Tensor, d: usize) -> Var {
    // [p, h, k] is stored row-major, so it is already a p × d matrix.
    tape.constant_view(t.data(), t.numel() / d, d)
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub down: Var,
    pub up: Var,
}

/// Prefix keys and values as `p × d` matrices on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PrefixVars {
    pub keys: Var,
    pub values: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub query: (Var, Var),
    pub value: (Var, Var),
    pub scaling: f64,
}

/// Tape-resident form of a [`LayerAdaptation`]; generated modules stay
/// differentiable in this form.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerVars {
    pub adapter: Option<AdapterVars>,
    pub self_prefix: Option<PrefixVars>,
    pub cross_prefix: Option<PrefixVars>,
    pub lora: Option<LoraVars>,
}

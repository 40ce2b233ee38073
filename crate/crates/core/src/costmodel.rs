//! Analytic inference cost model: FLOPs to serve `n` same-task examples and
//! the memory needed to cache a task's context.
//!
//! Compute follows the "one token costs `N` FLOPs" convention, where `N` is a
//! parameter count. The cost of the decoder attending over fused instruction
//! states is left out, as it touches only the few output tokens.

use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Instruction concatenated to every input.
    Concat,
    /// Instruction processed once by the hypernetwork.
    Hint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostScenario {
    pub name: String,
    pub method: Method,
    /// Underlying model parameters.
    pub model_params: u64,
    /// Hypernetwork generator parameters.
    pub generator_params: u64,
    /// Injected module parameters.
    pub peft_params: u64,
    /// Same-task examples processed.
    pub examples: u64,
    /// Instruction (plus demonstrations) length.
    pub instruction_len: u64,
    pub instance_len: u64,
    pub output_len: u64,
    /// Measured length of instruction and instance together. Medians of the
    /// joint sequence differ from the sum of the separate medians, so concat
    /// costs use this when present.
    #[serde(default)]
    pub joint_len: Option<u64>,
    pub layers: u64,
    pub model_dim: u64,
    pub heads: u64,
    pub head_dim: u64,
    /// Cached sequence length for memory estimates.
    pub cached_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub method: Method,
    pub flops_concat: u128,
    pub flops_hint: u128,
    pub flops_hint_simplified: u128,
    /// This scenario's own method cost over the reference's concat cost.
    pub ratio_vs_reference: f64,
    pub memory_kv_cache: u128,
    pub memory_hint: u128,
}

impl CostScenario {
    pub fn validate(&self) -> Result<()> {
        if self.examples == 0 {
            return Err(HintError::Config(format!("scenario {}: examples must be at least 1", self.name)));
        }
        Ok(())
    }

    fn concat_input_len(&self) -> u64 {
        self.joint_len.unwrap_or(self.instruction_len + self.instance_len)
    }

    pub fn cost(&self) -> u128 {
        match self.method {
            Method::Concat => flops_concat(self),
            Method::Hint => flops_hint(self),
        }
    }
}

/// `N·n·(t + i + o)`
pub fn flops_concat(s: &CostScenario) -> u128 {
    s.model_params as u128 * s.examples as u128 * (s.concat_input_len() + s.output_len) as u128
}

/// `t·(N + N′) + n·(N + A)·(i + o)`
pub fn flops_hint(s: &CostScenario) -> u128 {
    let n = s.model_params as u128;
    s.instruction_len as u128 * (n + s.generator_params as u128)
        + s.examples as u128 * (n + s.peft_params as u128) * (s.instance_len + s.output_len) as u128
}

/// `t·N + n·N·(i + o)`, dropping the generator and module terms.
pub fn flops_hint_simplified(s: &CostScenario) -> u128 {
    let n = s.model_params as u128;
    s.instruction_len as u128 * n + s.examples as u128 * n * (s.instance_len + s.output_len) as u128
}

/// Key/value cache of a decoder-only model: `2·l·h·k·s` values.
pub fn memory_kv_cache(s: &CostScenario) -> u128 {
    2 * s.layers as u128 * s.heads as u128 * s.head_dim as u128 * s.cached_len as u128
}

/// The same cache written as `2·l·d·s`; equal to [`memory_kv_cache`] when `h·k = d`.
pub fn memory_kv_cache_simplified(s: &CostScenario) -> u128 {
    2 * s.layers as u128 * s.model_dim as u128 * s.cached_len as u128
}

/// Cached task context: fused states `d·s`, adapters `2·n_a·l·d` and prefixes
/// `2·p·l·h·k`.
pub fn memory_hint(s: &CostScenario, prefix_len: u64, bottleneck: u64) -> u128 {
    let (l, d) = (s.layers as u128, s.model_dim as u128);
    d * s.cached_len as u128
        + 2 * bottleneck as u128 * l * d
        + 2 * prefix_len as u128 * l * s.heads as u128 * s.head_dim as u128
}

pub const DEFAULT_PREFIX: u64 = 30;
pub const DEFAULT_BOTTLENECK: u64 = 512;

/// Smallest `n` with `flops_hint < flops_concat`, if one exists up to `limit`.
pub fn crossover_examples(s: &CostScenario, limit: u64) -> Option<u64> {
    let mut probe = s.clone();
    // both costs are affine in n, so a binary search over n is exact
    let wins = |n: u64, p: &mut CostScenario| {
        p.examples = n;
        flops_hint(p) < flops_concat(p)
    };
    if !wins(limit, &mut probe) {
        return None;
    }
    let (mut lo, mut hi) = (1, limit);
    if wins(1, &mut probe) {
        return Some(1);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if wins(mid, &mut probe) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Costs relative to the reference scenario's concat FLOPs.
pub fn relative_flops_table(scenarios: &[CostScenario], reference: &str) -> Result<Vec<CostReport>> {
    let r = scenarios
        .iter()
        .find(|s| s.name == reference)
        .ok_or_else(|| HintError::Config(format!("reference scenario {reference} not found")))?;
    r.validate()?;
    let denom = flops_concat(r) as f64;
    scenarios
        .iter()
        .map(|s| {
            s.validate()?;
            Ok(CostReport {
                name: s.name.clone(),
                method: s.method,
                flops_concat: flops_concat(s),
                flops_hint: flops_hint(s),
                flops_hint_simplified: flops_hint_simplified(s),
                ratio_vs_reference: s.cost() as f64 / denom,
                memory_kv_cache: memory_kv_cache(s),
                memory_hint: memory_hint(s, DEFAULT_PREFIX, DEFAULT_BOTTLENECK),
            })
        })
        .collect()
}

pub const TABLE_COLUMNS: [&str; 8] = [
    "scenario",
    "method",
    "flops_concat",
    "flops_hint",
    "flops_hint_simplified",
    "rel_flops",
    "memory_kv_cache",
    "memory_hint",
];

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Concat => "concat",
        Method::Hint => "hint",
    }
}

pub fn table_csv(rows: &[CostReport]) -> String {
    let mut out = TABLE_COLUMNS.join(",") + "\n";
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{:.4},{},{}\n",
            r.name,
            method_name(r.method),
            r.flops_concat,
            r.flops_hint,
            r.flops_hint_simplified,
            r.ratio_vs_reference,
            r.memory_kv_cache,
            r.memory_hint
        );
    }
    out
}

pub fn table_markdown(rows: &[CostReport]) -> String {
    let mut out = format!("| {} |\n|{}\n", TABLE_COLUMNS.join(" | "), "---|".repeat(TABLE_COLUMNS.len()));
    for r in rows {
        out += &format!(
            "| {} | {} | {:.3e} | {:.3e} | {:.3e} | ×{:.2} | {} | {} |\n",
            r.name,
            method_name(r.method),
            r.flops_concat as f64,
            r.flops_hint as f64,
            r.flops_hint_simplified as f64,
            r.ratio_vs_reference,
            r.memory_kv_cache,
            r.memory_hint
        );
    }
    out
}

/// One row of a FLOPs-versus-instruction-length sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub instruction_len: u64,
    pub flops_concat: u128,
    pub flops_hint: u128,
}

/// Varies the instruction length at fixed `n`; the joint-length override is
/// dropped so both curves use the same `t`.
pub fn instruction_sweep(base: &CostScenario, lengths: impl IntoIterator<Item = u64>) -> Vec<SweepPoint> {
    let mut s = base.clone();
    s.joint_len = None;
    lengths
        .into_iter()
        .map(|t| {
            s.instruction_len = t;
            SweepPoint {
                instruction_len: t,
                flops_concat: flops_concat(&s),
                flops_hint: flops_hint(&s),
            }
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("instruction_len,flops_concat,flops_hint\n");
    for p in points {
        out += &format!("{},{},{}\n", p.instruction_len, p.flops_concat, p.flops_hint);
    }
    out
}

/// Shape of an encoder-decoder used to estimate generator and module sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub params: u64,
    /// Layers per stack.
    pub layers: u64,
    pub model_dim: u64,
    pub heads: u64,
    pub head_dim: u64,
}

impl Architecture {
    /// T5 v1.1 base-sized model, as used for the 250M-parameter comparisons.
    pub const BASE: Architecture = Architecture {
        params: 250_000_000,
        layers: 12,
        model_dim: 768,
        heads: 12,
        head_dim: 64,
    };

    /// Adapter and prefix parameters injected into both stacks. Prefixes sit
    /// in encoder self-attention and decoder self- and cross-attention.
    pub fn peft_params(&self, bottleneck: u64, prefix_len: u64) -> u64 {
        let d = self.model_dim;
        let adapters = 2 * 2 * self.layers * bottleneck * d;
        let prefixes = 3 * self.layers * 2 * prefix_len * d;
        adapters + prefixes
    }

    /// Generator size: one embedding per generated column/token, one
    /// cross-attention block and two `d → d → d` MLPs.
    pub fn generator_params(&self, bottleneck: u64, prefix_len: u64) -> u64 {
        let d = self.model_dim;
        let rows = 2 * 2 * self.layers * bottleneck + 3 * self.layers * 2 * prefix_len;
        rows * d + 4 * d * d + d + 2 * (2 * d * d + d)
    }
}

/// Medians of the instruction-following benchmark at base size: rows for
/// concat and HINT in the definition-only and definition + 2 examples formats.
pub fn sni_preset() -> Vec<CostScenario> {
    let a = Architecture::BASE;
    let base = CostScenario {
        name: String::new(),
        method: Method::Concat,
        model_params: a.params,
        generator_params: a.generator_params(DEFAULT_BOTTLENECK, DEFAULT_PREFIX),
        peft_params: a.peft_params(DEFAULT_BOTTLENECK, DEFAULT_PREFIX),
        examples: 100,
        instruction_len: 69,
        instance_len: 44,
        output_len: 1,
        joint_len: Some(133),
        layers: 2 * a.layers,
        model_dim: a.model_dim,
        heads: a.heads,
        head_dim: a.head_dim,
        cached_len: 69,
    };
    vec![
        CostScenario {
            name: "concat_def".into(),
            ..base.clone()
        },
        CostScenario {
            name: "concat_def_2pos".into(),
            instruction_len: 197,
            joint_len: Some(199),
            cached_len: 197,
            ..base.clone()
        },
        CostScenario {
            name: "hint_def".into(),
            method: Method::Hint,
            ..base.clone()
        },
        CostScenario {
            name: "hint_def_2pos".into(),
            method: Method::Hint,
            instruction_len: 197,
            joint_len: Some(199),
            cached_len: 197,
            ..base
        },
    ]
}

pub const SNI_REFERENCE: &str = "concat_def";

/// Prompted-dataset medians (instance 81, template 24, joint 103, output 6).
pub fn p3_preset() -> Vec<CostScenario> {
    let a = Architecture::BASE;
    let base = CostScenario {
        name: "p3_concat".into(),
        method: Method::Concat,
        model_params: a.params,
        generator_params: a.generator_params(DEFAULT_BOTTLENECK, DEFAULT_PREFIX),
        peft_params: a.peft_params(DEFAULT_BOTTLENECK, DEFAULT_PREFIX),
        examples: 100,
        instruction_len: 24,
        instance_len: 81,
        output_len: 6,
        joint_len: Some(103),
        layers: 2 * a.layers,
        model_dim: a.model_dim,
        heads: a.heads,
        head_dim: a.head_dim,
        cached_len: 24,
    };
    vec![
        base.clone(),
        CostScenario {
            name: "p3_hint".into(),
            method: Method::Hint,
            ..base
        },
    ]
}

pub const P3_REFERENCE: &str = "p3_concat";

/// Multiply-accumulates predicted by the params × tokens rule for one
/// encoder-decoder forward pass. Encoder tokens pay for the encoder weights
/// plus the decoder's cross-attention key and value projections (computed on
/// encoder states); decoder tokens pay for the rest of the decoder and the
/// output head. Attention score products are not counted.
pub fn encoder_decoder_macs(cfg: &ModelConfig, encoder_tokens: u64, decoder_tokens: u64) -> u128 {
    let (d, f, l) = (cfg.model_dim as u128, cfg.ffn_dim as u128, cfg.layers as u128);
    let attn = 4 * d * d;
    let ffn = 2 * d * f;
    let per_encoder_token = l * (attn + ffn) + l * 2 * d * d;
    let per_decoder_token = l * (attn + 2 * d * d + ffn) + d * cfg.vocab_size as u128;
    per_encoder_token * encoder_tokens as u128 + per_decoder_token * decoder_tokens as u128
}

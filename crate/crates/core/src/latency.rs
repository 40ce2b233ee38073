//! Wall-clock comparison of once-per-task HINT inference against feeding the
//! instruction with every input, on synthetic token sequences of the
//! instruction-benchmark median lengths.

use std::time::Instant;

use serde::Serialize;

use crate::corpus::tokenizer::{BYTE_OFFSET, SEP};
use crate::error::{HintError, Result};
use crate::model::{DecodeMode, HintModel};
use crate::peft::PeftKinds;

/// Median lengths: definition 69 tokens, a definition with two positive
/// examples 197, instance 44, output 1.
pub const DEFINITION_LEN: usize = 69;
pub const DEMONSTRATION_LEN: usize = (197 - DEFINITION_LEN) / 2;
pub const INSTANCE_LEN: usize = 44;
pub const OUTPUT_LEN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    Hint,
    Concat,
}

impl LatencyMode {
    pub fn name(self) -> &'static str {
        match self {
            LatencyMode::Hint => "hint",
            LatencyMode::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub shots: usize,
    pub mode: LatencyMode,
    pub median_ms: f64,
    pub p90_ms: f64,
    /// Every repetition, in run order.
    pub samples_ms: Vec<f64>,
}

fn filler(len: usize, salt: usize) -> Vec<u32> {
    (0..len).map(|i| BYTE_OFFSET + (b'a' as u32) + ((i * 7 + salt * 13) % 26) as u32).collect()
}

/// Definition followed by `shots` demonstrations, SEP-delimited.
pub fn synthetic_instruction(shots: usize) -> Vec<u32> {
    let mut t = filler(DEFINITION_LEN, 0);
    for s in 0..shots {
        t.push(SEP);
        t.extend(filler(DEMONSTRATION_LEN - 1, s + 1));
    }
    t
}

pub fn synthetic_instances(n: usize) -> Vec<Vec<u32>> {
    (0..n).map(|i| filler(INSTANCE_LEN, 100 + i)).collect()
}

/// Processes `instances` once in the given mode.
pub fn run_once(model: &HintModel, mode: LatencyMode, instruction: &[u32], instances: &[Vec<u32>]) -> Result<()> {
    match mode {
        LatencyMode::Hint => {
            let ctx = model.context_from_tokens("latency", instruction.to_vec(), PeftKinds::ADAPTERS_PREFIXES)?;
            for x in instances {
                let enc = model.encode_with(&ctx, x)?;
                model.fuse_and_decode(&ctx, &enc, DecodeMode::Greedy { max_len: OUTPUT_LEN }, true)?;
            }
        }
        LatencyMode::Concat => {
            for x in instances {
                let mut input = instruction.to_vec();
                input.push(SEP);
                input.extend_from_slice(x);
                model.predict_vanilla(&input, OUTPUT_LEN)?;
            }
        }
    }
    Ok(())
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Times both modes at each shot count. Repetitions of the two modes are
/// interleaved so slow drifts in machine load hit both alike.
pub fn latency_bench(model: &HintModel, shots: &[usize], examples: usize, reps: usize) -> Result<Vec<LatencyRow>> {
    if reps < 5 {
        return Err(HintError::Config(format!("latency needs at least 5 repetitions, got {reps}")));
    }
    if examples == 0 {
        return Err(HintError::Config("latency needs at least one example".into()));
    }
    let instances = synthetic_instances(examples);
    let mut rows = Vec::new();
    for &k in shots {
        let instruction = synthetic_instruction(k);
        let longest = instruction.len() + 1 + INSTANCE_LEN;
        if longest > model.config.max_seq_len {
            return Err(HintError::Length {
                len: longest,
                max: model.config.max_seq_len,
            });
        }
        let mut samples = [Vec::new(), Vec::new()];
        for _ in 0..reps {
            for (slot, mode) in [LatencyMode::Hint, LatencyMode::Concat].into_iter().enumerate() {
                let t = Instant::now();
                run_once(model, mode, &instruction, &instances)?;
                samples[slot].push(t.elapsed().as_secs_f64() * 1e3);
            }
        }
        for (mode, s) in [LatencyMode::Hint, LatencyMode::Concat].into_iter().zip(samples) {
            rows.push(LatencyRow {
                shots: k,
                mode,
                median_ms: median(&s),
                p90_ms: percentile(&s, 0.9),
                samples_ms: s,
            });
        }
    }
    Ok(rows)
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut out = String::from("shots,mode,median_ms,p90_ms\n");
    for r in rows {
        out += &format!("{},{},{:.3},{:.3}\n", r.shots, r.mode.name(), r.median_ms, r.p90_ms);
    }
    out
}

/// Median-time increase from the smallest to the largest shot count.
pub fn growth(rows: &[LatencyRow], mode: LatencyMode) -> Option<f64> {
    let mine: Vec<_> = rows.iter().filter(|r| r.mode == mode).collect();
    let lo = mine.iter().min_by_key(|r| r.shots)?;
    let hi = mine.iter().max_by_key(|r| r.shots)?;
    Some(hi.median_ms - lo.median_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;

    #[test]
    fn synthetic_lengths_match_the_medians() {
        assert_eq!(synthetic_instruction(0).len(), 69);
        assert_eq!(synthetic_instruction(2).len(), 197);
        assert!(synthetic_instances(3).iter().all(|x| x.len() == 44));
    }

    #[test]
    fn percentiles() {
        let s = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(median(&s), 3.0);
        assert_eq!(percentile(&s, 0.9), 5.0);
        assert_eq!(median(&[1.0, 2.0]), 1.5);
    }

    #[test]
    fn bench_emits_one_row_per_mode_and_shot() {
        let m = HintModel::new(ModelConfig::tiny(), 0).unwrap();
        assert!(latency_bench(&m, &[0], 1, 4).is_err());
        // the tiny model's position table is shorter than a 3-shot prompt
        assert!(matches!(latency_bench(&m, &[3], 1, 5), Err(HintError::Length { .. })));
        let mut cfg = ModelConfig::tiny();
        cfg.max_seq_len = 512;
        let m = HintModel::new(cfg, 0).unwrap();
        let rows = latency_bench(&m, &[0, 1], 2, 5).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.samples_ms.len() == 5 && r.p90_ms >= r.median_ms));
        let csv = latency_csv(&rows);
        assert!(csv.starts_with("shots,mode,median_ms,p90_ms\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(growth(&rows, LatencyMode::Hint).is_some());
    }
}

//! One function per subcommand. Each writes its artifacts and a manifest
//! into the output directory and returns the manifest.

use std::path::{Path, PathBuf};

use hint_core::corpus::tasks::train_tasks;
use hint_core::corpus::{make_task_suite, suite_from_manifest, suite_manifest, tokenizer, Split, SyntheticTask, SAMPLE_TEXT};
use hint_core::costmodel::{
    crossover_examples, instruction_sweep, p3_preset, relative_flops_table, sni_preset, sweep_csv, table_csv,
    table_markdown, CostScenario, Method, P3_REFERENCE, SNI_REFERENCE,
};
use hint_core::hypernet::TaskContext;
use hint_core::latency::{latency_bench, latency_csv};
use hint_core::training::{self, score_task, task_context, EvalReport, Setting, MAX_DECODE};
use hint_core::{HintError, HintModel, Result};
use serde::Serialize;

use crate::config::{RunConfig, ScenarioFile};
use crate::manifest::{file_hash, RunManifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUITE_FILE: &str = "suite.toml";

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn config_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn load_corpus(cfg: &RunConfig) -> Result<(String, String)> {
    match &cfg.data.corpus {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| HintError::Data(format!("corpus {}: {e}", p.display())))?;
            let hash = hint_core::io::sha256_hex(text.as_bytes());
            Ok((text, hash))
        }
        None => Ok((SAMPLE_TEXT.to_string(), hint_core::io::sha256_hex(SAMPLE_TEXT.as_bytes()))),
    }
}

fn save_checkpoint(manifest: &mut RunManifest, model: &HintModel, out: &Path) -> Result<()> {
    manifest.write_bytes(out, CHECKPOINT_FILE, &model.to_bytes()?)?;
    Ok(())
}

/// Chunked-corpus pretraining from a fresh initialization.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    prepare(out)?;
    let (corpus, corpus_hash) = load_corpus(cfg)?;
    let mut m = RunManifest::new("pretrain", config_json(cfg)?, cfg.pretrain.seed, vec![("corpus".into(), corpus_hash)]);
    let mut model = HintModel::new(cfg.model.clone(), cfg.model_seed)?;
    let trainer = training::pretrain(&mut model, &corpus, &cfg.pretrain)?;
    save_checkpoint(&mut m, &model, out)?;
    let mut log = Vec::new();
    trainer.write_log(&mut log)?;
    m.write_text(out, "pretrain_log.csv", &String::from_utf8_lossy(&log))?;
    m.save(out)?;
    Ok(m)
}

fn load_model(checkpoint: &Path) -> Result<HintModel> {
    HintModel::load(checkpoint)
}

/// Mixed-task finetuning on the training split of the configured suite.
pub fn finetune(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    prepare(out)?;
    let mut model = load_model(checkpoint)?;
    if model.config != cfg.model {
        return Err(HintError::Version(format!(
            "checkpoint {} was built for a different model configuration",
            checkpoint.display()
        )));
    }
    let suite = make_task_suite(cfg.data.suite_seed);
    let suite_text = suite_manifest(&suite, cfg.data.suite_seed);
    let inputs = vec![
        ("checkpoint".into(), file_hash(checkpoint)?),
        ("suite".into(), hint_core::io::sha256_hex(suite_text.as_bytes())),
    ];
    let mut m = RunManifest::new("finetune", config_json(cfg)?, cfg.finetune.seed, inputs);
    let trainer = training::finetune(&mut model, &train_tasks(&suite), &cfg.finetune)?;
    save_checkpoint(&mut m, &model, out)?;
    m.write_bytes(out, SUITE_FILE, suite_text.as_bytes())?;
    let mut log = Vec::new();
    trainer.write_log(&mut log)?;
    m.write_text(out, "finetune_log.csv", &String::from_utf8_lossy(&log))?;
    m.save(out)?;
    Ok(m)
}

pub fn load_suite(path: &Path) -> Result<Vec<SyntheticTask>> {
    let text = std::fs::read_to_string(path).map_err(|e| HintError::Data(format!("suite {}: {e}", path.display())))?;
    Ok(suite_from_manifest(&text)?.0)
}

pub fn context_file(task_id: &str, setting: Setting, shots: usize) -> String {
    format!("{task_id}.{}.{shots}.ctx", setting.name())
}

/// Greedy predictions for one task, reusing a cached context file when one
/// matches the task, setting and shot count.
fn predict_with_cache(
    model: &HintModel,
    task: &SyntheticTask,
    setting: Setting,
    shots: usize,
    cache: Option<&Path>,
) -> Result<Vec<Vec<u32>>> {
    let (Some(dir), Some(variant)) = (cache, setting.variant()) else {
        return training::predict_task(model, task, setting, shots, true);
    };
    let path = dir.join(context_file(&task.task_id, setting, shots));
    let ctx = if path.exists() {
        TaskContext::load(&path, &model.fingerprint())?
    } else {
        task_context(model, task, setting, shots)?
    };
    task.eval_instances
        .iter()
        .map(|e| model.predict(&ctx, &tokenizer::encode(&e.input), MAX_DECODE, variant.fusion))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub setting: Setting,
    pub shots: usize,
    pub split: Split,
    pub exact_match: f64,
    pub token_f1: f64,
}

/// Per-task and per-split scores for every setting and shot count.
pub fn eval(
    checkpoint: &Path,
    suite_path: &Path,
    settings: &[Setting],
    shots: &[usize],
    cache: Option<&Path>,
    out: &Path,
) -> Result<(RunManifest, Vec<EvalSummary>)> {
    prepare(out)?;
    let model = load_model(checkpoint)?;
    let suite = load_suite(suite_path)?;
    let inputs = vec![
        ("checkpoint".into(), file_hash(checkpoint)?),
        ("suite".into(), file_hash(suite_path)?),
    ];
    let config = serde_json::json!({ "settings": settings, "shots": shots });
    let mut m = RunManifest::new("eval", config, 0, inputs);
    let tasks: Vec<&SyntheticTask> = suite.iter().collect();
    let mut per_task = String::new();
    let mut summary = Vec::new();
    for &setting in settings {
        for &k in shots {
            let scores = hint_core::parallel::par_map(&tasks, |t| {
                predict_with_cache(&model, t, setting, k, cache).map(|p| score_task(t, &p))
            });
            let report = EvalReport {
                setting,
                shots: k,
                tasks: scores.into_iter().collect::<Result<_>>()?,
            };
            let csv = report.to_csv();
            per_task += if per_task.is_empty() { &csv } else { csv.split_once('\n').map_or("", |(_, rest)| rest) };
            for split in [Split::Train, Split::HeldOut] {
                if report.tasks.iter().any(|t| t.split == split) {
                    summary.push(EvalSummary {
                        setting,
                        shots: k,
                        split,
                        exact_match: report.exact_match(split),
                        token_f1: report.token_f1(split),
                    });
                }
            }
        }
    }
    let mut sum_csv = String::from("setting,shots,split,exact_match,token_f1\n");
    for s in &summary {
        let split = if s.split == Split::Train { "train" } else { "held_out" };
        sum_csv += &format!("{},{},{split},{:.4},{:.4}\n", s.setting.name(), s.shots, s.exact_match, s.token_f1);
    }
    m.write_text(out, "results.csv", &per_task)?;
    m.write_text(out, "summary.csv", &sum_csv)?;
    m.save(out)?;
    Ok((m, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Sni,
    P3,
}

/// Instruction lengths swept for the FLOPs-versus-length plot.
pub const SWEEP_LENGTHS: std::ops::RangeInclusive<u64> = 0..=400;
pub const SWEEP_STEP: usize = 10;
pub const CROSSOVER_LIMIT: u64 = 1_000_000;

/// Relative-FLOPs table, FLOPs-versus-instruction-length sweep and crossover
/// points. Pure arithmetic; no model is loaded.
pub fn cost_report(preset: Preset, scenarios: Option<&Path>, out: &Path) -> Result<RunManifest> {
    prepare(out)?;
    let (rows, reference) = match scenarios {
        Some(p) => {
            let f = ScenarioFile::load(p)?;
            (f.scenario, f.reference)
        }
        None => match preset {
            Preset::Sni => (sni_preset(), SNI_REFERENCE.to_string()),
            Preset::P3 => (p3_preset(), P3_REFERENCE.to_string()),
        },
    };
    let mut m = RunManifest::new(
        "cost-report",
        serde_json::json!({ "reference": reference, "scenarios": rows }),
        0,
        Vec::new(),
    );
    let table = relative_flops_table(&rows, &reference)?;
    let mut md = table_markdown(&table);
    md += "\n| scenario | crossover n* |\n|---|---|\n";
    for s in rows.iter().filter(|s| s.method == Method::Hint) {
        let n = crossover_examples(s, CROSSOVER_LIMIT).map_or("none".to_string(), |n| n.to_string());
        md += &format!("| {} | {n} |\n", s.name);
    }
    let base: &CostScenario = rows.iter().find(|s| s.name == reference).expect("reference checked above");
    let sweep = instruction_sweep(base, SWEEP_LENGTHS.step_by(SWEEP_STEP));
    m.write_text(out, "cost_table.csv", &table_csv(&table))?;
    m.write_text(out, "cost_table.md", &md)?;
    m.write_text(out, "flops_sweep.csv", &sweep_csv(&sweep))?;
    m.save(out)?;
    Ok(m)
}

/// Wall-clock of HINT against concatenation at each shot count.
pub fn latency(checkpoint: &Path, shots: &[usize], examples: usize, reps: usize, out: &Path) -> Result<RunManifest> {
    prepare(out)?;
    let model = load_model(checkpoint)?;
    let config = serde_json::json!({ "shots": shots, "examples": examples, "reps": reps });
    let mut m = RunManifest::new("latency-bench", config, 0, vec![("checkpoint".into(), file_hash(checkpoint)?)]);
    let rows = latency_bench(&model, shots, examples, reps)?;
    m.write_text(out, "latency.csv", &latency_csv(&rows))?;
    m.save(out)?;
    Ok(m)
}

/// Builds and stores one context per task for later `eval --cache`.
pub fn cache_warm(checkpoint: &Path, suite_path: &Path, setting: Setting, shots: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    if !setting.uses_hypernet() {
        return Err(HintError::Config(format!("{} builds no task context", setting.name())));
    }
    prepare(dir)?;
    let model = load_model(checkpoint)?;
    let suite = load_suite(suite_path)?;
    suite
        .iter()
        .map(|t| {
            let ctx = task_context(&model, t, setting, shots)?;
            let path = dir.join(context_file(&t.task_id, setting, shots));
            ctx.save(&path, &model.config)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheEntry {
    pub file: String,
    pub task_id: String,
    pub instruction_tokens: usize,
    pub fingerprint: String,
    pub bytes: u64,
}

pub fn cache_list(dir: &Path) -> Result<Vec<CacheEntry>> {
    let mut entries = Vec::new();
    if !dir.exists() {
        return Ok(entries);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.sort();
    for p in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "ctx")) {
        let ctx = TaskContext::from_container(hint_core::io::Container::load(&p)?)?;
        entries.push(CacheEntry {
            file: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            task_id: ctx.task_id,
            instruction_tokens: ctx.instruction_tokens.len(),
            fingerprint: ctx.fingerprint,
            bytes: std::fs::metadata(&p)?.len(),
        });
    }
    Ok(entries)
}

/// Removes cached contexts of one task, or all of them. Returns the count.
pub fn cache_evict(dir: &Path, task: Option<&str>) -> Result<usize> {
    let mut removed = 0;
    for e in cache_list(dir)? {
        if task.map_or(true, |t| t == e.task_id) {
            std::fs::remove_file(dir.join(&e.file))?;
            removed += 1;
        }
    }
    Ok(removed)
}

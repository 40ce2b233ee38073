use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hint_cli::{RunConfig, RunManifest};
use hint_core::transformer::ModelConfig;
use hint_core::HintModel;

fn hint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hint")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig { max_seq_len: 512, ..ModelConfig::tiny() };
    cfg.pretrain.steps = 2;
    cfg.pretrain.batch_size = 2;
    cfg.finetune.steps = 2;
    cfg.finetune.batch_size = 2;
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn show_config_prints_the_defaults() {
    let out = hint(&["show-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
}

#[test]
fn bad_config_key_exits_with_code_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[pretrain]\nlearnig_rate = 0.1\n").unwrap();
    let out = hint(&["pretrain", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnig_rate"));
}

#[test]
fn unreadable_checkpoint_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.toml");
    std::fs::write(&suite, "").unwrap();
    let out = hint(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("missing.bin")),
        "--suite",
        s(&suite),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn zero_step_pretraining_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("zero.toml");
    std::fs::write(&cfg, "[pretrain]\nsteps = 0\nmode = \"pretrain\"\n").unwrap();
    let out = hint(&["pretrain", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved = HintModel::load(&dir.path().join("checkpoint.bin")).unwrap();
    let init = HintModel::new(ModelConfig::desk(), 0).unwrap();
    assert_eq!(saved.content_hash().unwrap(), init.content_hash().unwrap());
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |tag: &str| -> PathBuf {
        let pre = dir.path().join(format!("pre_{tag}"));
        let ft = dir.path().join(format!("ft_{tag}"));
        let ev = dir.path().join(format!("ev_{tag}"));
        assert!(hint(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]).status.success());
        let out = hint(&["finetune", "--config", s(&cfg), "--checkpoint", s(&pre.join("checkpoint.bin")), "--out", s(&ft)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = hint(&[
            "eval",
            "--checkpoint",
            s(&ft.join("checkpoint.bin")),
            "--suite",
            s(&ft.join("suite.toml")),
            "--settings",
            "hint,no_instruct",
            "--shots",
            "0",
            "--out",
            s(&ev),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir.path().to_path_buf()
    };
    run("a");
    run("b");
    let hashes = |sub: &str| {
        let m = RunManifest::load(&dir.path().join(sub)).unwrap();
        m.outputs
            .into_iter()
            .filter(|o| !o.path.to_string_lossy().ends_with("_log.csv"))
            .map(|o| (o.path, o.sha256))
            .collect::<Vec<_>>()
    };
    for stage in ["pre", "ft", "ev"] {
        assert_eq!(hashes(&format!("{stage}_a")), hashes(&format!("{stage}_b")), "{stage}");
    }
    let results = std::fs::read_to_string(dir.path().join("ev_a/results.csv")).unwrap();
    let mut lines = results.lines();
    assert!(lines.next().unwrap().starts_with("# run "));
    assert_eq!(lines.next().unwrap(), "setting,shots,task_id,split,exact_match,token_f1,instances");
    assert_eq!(lines.count(), 2 * 12);
    let summary = std::fs::read_to_string(dir.path().join("ev_a/summary.csv")).unwrap();
    assert!(summary.contains("hint,0,held_out,"));
    assert!(summary.contains("no_instruct,0,train,"));
}

#[test]
fn cached_contexts_give_the_same_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let pre = dir.path().join("pre");
    let ft = dir.path().join("ft");
    let cache = dir.path().join("cache");
    assert!(hint(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]).status.success());
    assert!(hint(&["finetune", "--config", s(&cfg), "--checkpoint", s(&pre.join("checkpoint.bin")), "--out", s(&ft)])
        .status
        .success());
    let ckpt = ft.join("checkpoint.bin");
    let suite = ft.join("suite.toml");
    let warm = hint(&["cache", "warm", "--checkpoint", s(&ckpt), "--suite", s(&suite), "--shots", "2", "--dir", s(&cache)]);
    assert!(warm.status.success(), "{}", String::from_utf8_lossy(&warm.stderr));
    let list = String::from_utf8(hint(&["cache", "list", "--dir", s(&cache)]).stdout).unwrap();
    assert_eq!(list.lines().count(), 1 + 12);
    assert!(list.contains("reverse.hint.2.ctx,reverse,"));

    let eval = |extra: &[&str], out: &Path| {
        let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--suite", s(&suite), "--shots", "2", "--out", s(out)];
        args.extend_from_slice(extra);
        assert!(hint(&args).status.success());
        let text = std::fs::read_to_string(out.join("results.csv")).unwrap();
        text.lines().skip(1).map(String::from).collect::<Vec<_>>()
    };
    let plain = eval(&[], &dir.path().join("e1"));
    let cached = eval(&["--cache", s(&cache)], &dir.path().join("e2"));
    assert_eq!(plain, cached);

    let evict = String::from_utf8(hint(&["cache", "evict", "--dir", s(&cache), "--task", "reverse"]).stdout).unwrap();
    assert_eq!(evict.trim(), "removed 1");
    let evict = String::from_utf8(hint(&["cache", "evict", "--dir", s(&cache)]).stdout).unwrap();
    assert_eq!(evict.trim(), "removed 11");
}

#[test]
fn finetuning_a_foreign_checkpoint_is_a_version_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ckpt = dir.path().join("desk.bin");
    HintModel::new(ModelConfig::desk(), 0).unwrap().save(&ckpt).unwrap();
    let out = hint(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("ft"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different model configuration"));
}

#[test]
fn cost_report_writes_tables_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = hint(&["cost-report", "--out", s(dir.path())]);
    assert!(out.status.success());
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.contains("| hint_def | hint |"));
    assert!(md.contains("crossover n*"));
    let csv = std::fs::read_to_string(dir.path().join("cost_table.csv")).unwrap();
    let ref_row = csv.lines().find(|l| l.starts_with("concat_def,")).unwrap();
    assert!(ref_row.contains(",1.0000,"));
    let sweep = std::fs::read_to_string(dir.path().join("flops_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().nth(1).unwrap(), "instruction_len,flops_concat,flops_hint");
    assert_eq!(sweep.lines().count(), 2 + 41);

    let p3 = hint(&["cost-report", "--preset", "p3", "--out", s(&dir.path().join("p3"))]);
    assert!(p3.status.success());

    let custom = dir.path().join("s.toml");
    std::fs::write(&custom, "reference = \"nope\"\n[[scenario]]\nname = \"x\"\n").unwrap();
    let bad = hint(&["cost-report", "--scenarios", s(&custom), "--out", s(dir.path())]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn latency_bench_emits_the_timing_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.bin");
    let cfg = ModelConfig { max_seq_len: 512, ..ModelConfig::tiny() };
    HintModel::new(cfg, 0).unwrap().save(&ckpt).unwrap();
    let out = hint(&["latency-bench", "--checkpoint", s(&ckpt), "--shots", "0,1", "--examples", "2", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("latency.csv")).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[1], "shots,mode,median_ms,p90_ms");
    assert_eq!(lines.len(), 2 + 4);
    let few = hint(&["latency-bench", "--checkpoint", s(&ckpt), "--reps", "3", "--out", s(dir.path())]);
    assert_eq!(few.status.code(), Some(2));
}

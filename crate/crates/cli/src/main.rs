use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hint_cli::commands::{self, Preset};
use hint_cli::RunConfig;
use hint_core::training::Setting;
use hint_core::Result;

#[derive(Parser)]
#[command(name = "hint", version, about = "Instruction hypernetworks at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a fresh model on chunked text.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/pretrain")]
        out: PathBuf,
    },
    /// Finetune a checkpoint on the training tasks.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/finetune")]
        out: PathBuf,
    },
    /// Exact match and token F1 per task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Suite manifest written by `finetune`.
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "hint")]
        settings: Vec<Setting>,
        #[arg(long, value_delimiter = ',', default_value = "0,2")]
        shots: Vec<usize>,
        /// Directory of contexts from `cache warm`.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Relative FLOPs, FLOPs sweep and crossover points.
    CostReport {
        #[arg(long, value_enum, default_value = "sni")]
        preset: Preset,
        /// TOML file with `reference` and `[[scenario]]` tables; overrides the preset.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long, default_value = "runs/cost")]
        out: PathBuf,
    },
    /// Time HINT against instruction concatenation.
    LatencyBench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        shots: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        examples: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value = "runs/latency")]
        out: PathBuf,
    },
    /// Manage cached task contexts.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Print the default run configuration.
    ShowConfig,
}

#[derive(Subcommand)]
enum CacheAction {
    Warm {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value = "hint")]
        setting: Setting,
        #[arg(long, default_value_t = 0)]
        shots: usize,
        #[arg(long, default_value = "runs/cache")]
        dir: PathBuf,
    },
    List {
        #[arg(long, default_value = "runs/cache")]
        dir: PathBuf,
    },
    Evict {
        #[arg(long, default_value = "runs/cache")]
        dir: PathBuf,
        /// Only this task; every entry when omitted.
        #[arg(long)]
        task: Option<String>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), |p| RunConfig::load(p))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let m = commands::pretrain(&load_config(config.as_ref())?, &out)?;
            println!("pretrain {} -> {}", m.run_id, out.display());
        }
        Command::Finetune { config, checkpoint, out } => {
            let m = commands::finetune(&load_config(config.as_ref())?, &checkpoint, &out)?;
            println!("finetune {} -> {}", m.run_id, out.display());
        }
        Command::Eval { checkpoint, suite, settings, shots, cache, out } => {
            let (_, summary) = commands::eval(&checkpoint, &suite, &settings, &shots, cache.as_deref(), &out)?;
            for s in summary {
                println!(
                    "{} shots={} {:?}: exact_match {:.3} token_f1 {:.3}",
                    s.setting.name(),
                    s.shots,
                    s.split,
                    s.exact_match,
                    s.token_f1
                );
            }
        }
        Command::CostReport { preset, scenarios, out } => {
            commands::cost_report(preset, scenarios.as_deref(), &out)?;
            print!("{}", std::fs::read_to_string(out.join("cost_table.md"))?);
        }
        Command::LatencyBench { checkpoint, shots, examples, reps, out } => {
            commands::latency(&checkpoint, &shots, examples, reps, &out)?;
            print!("{}", std::fs::read_to_string(out.join("latency.csv"))?);
        }
        Command::Cache { action } => match action {
            CacheAction::Warm { checkpoint, suite, setting, shots, dir } => {
                for p in commands::cache_warm(&checkpoint, &suite, setting, shots, &dir)? {
                    println!("{}", p.display());
                }
            }
            CacheAction::List { dir } => {
                println!("file,task_id,instruction_tokens,fingerprint,bytes");
                for e in commands::cache_list(&dir)? {
                    println!("{},{},{},{},{}", e.file, e.task_id, e.instruction_tokens, e.fingerprint, e.bytes);
                }
            }
            CacheAction::Evict { dir, task } => {
                println!("removed {}", commands::cache_evict(&dir, task.as_deref())?);
            }
        },
        Command::ShowConfig => print!("{}", RunConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

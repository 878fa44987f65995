//! Command-line entry point: training runs, checkpoint evaluation, the
//! ablation harness, and data export.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use driftlearn::ablation::{builtin_ladder, run_harness, Variant};
use driftlearn::checkpoint::load_checkpoint;
use driftlearn::config::RunConfig;
use driftlearn::eval::evaluate_checkpoint;
use driftlearn::memory::dump_memory_csv;
use driftlearn::stream::{export_holdout_csv, holdout_set};
use driftlearn::trainer::run;

#[derive(Parser)]
#[command(name = "driftlearn", version, about = "Online continual learning on synthetic drifting streams")]
struct Cli {
    /// Print the full default configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic stream and emit run artifacts.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the holdouts of all tasks seen.
    Eval(EvalArgs),
    /// Run the ablation harness across variants and seeds.
    Ablate(AblateArgs),
    /// Export a class-balanced holdout set as CSV.
    ExportHoldout(ExportHoldoutArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config TOML; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Separate stream config TOML overriding the [stream] section.
    #[arg(long)]
    stream_config: Option<PathBuf>,
    /// Override the run seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for steps.jsonl, checkpoints/, memory.csv,
    /// summary.json.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Additionally dump the final memory snapshot to this path.
    #[arg(long)]
    dump_memory: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (manifest.json + weights.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stream config TOML defining the holdout distributions.
    #[arg(long)]
    stream_config: Option<PathBuf>,
    /// Holdout examples per class and task.
    #[arg(long, default_value_t = 50)]
    n_per_class: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// Base config TOML (the full method); defaults when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Directory of extra variant TOML overlays applied on top of the base;
    /// when omitted only the built-in ladder runs.
    #[arg(long)]
    variants: Option<PathBuf>,
    /// Number of seeds per variant (seeds 0..n).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    #[arg(long, default_value = "results.md")]
    out_md: PathBuf,
}

#[derive(Args)]
struct ExportHoldoutArgs {
    #[arg(long)]
    stream_config: Option<PathBuf>,
    #[arg(long)]
    task: usize,
    #[arg(long, default_value_t = 50)]
    n_per_class: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(config: Option<&Path>, stream_config: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {path:?}"))?,
        None => RunConfig::default(),
    };
    if let Some(path) = stream_config {
        let text = std::fs::read_to_string(path)?;
        // Accept either a bare stream table or a [stream] section.
        let overlay = if text.contains("[stream") {
            text
        } else {
            format!("[stream]\n{text}")
        };
        cfg = cfg.with_overlay_str(&overlay)?;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if cli.print_config {
        print!("{}", RunConfig::default().to_toml_string()?);
        return Ok(());
    }

    match cli.command {
        None => bail!("no command given; try --help"),
        Some(Command::Train(args)) => {
            let mut cfg = load_config(args.config.as_deref(), args.stream_config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.trainer.seed = seed;
            }
            let outcome = run(cfg, Some(&args.out))?;
            if let Some(path) = args.dump_memory {
                dump_memory_csv(&path, &outcome.memory)?;
            }
            println!(
                "run complete: AMCA {:.4} over {} checkpoints ({}s); artifacts in {}",
                outcome.summary.amca,
                outcome.summary.reports.len(),
                outcome.summary.wall_time_secs.round(),
                args.out.display()
            );
        }
        Some(Command::Eval(args)) => {
            let cfg = load_config(None, args.stream_config.as_deref())?;
            let (model, opt) = load_checkpoint(&args.checkpoint)?;
            let stream = cfg.stream.resolved().map_err(anyhow::Error::from)?;
            let report = evaluate_checkpoint(&model, &stream, opt.iteration, args.n_per_class)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Some(Command::Ablate(args)) => {
            let base = load_config(args.base.as_deref(), None)?;
            let mut variants = builtin_ladder(&base);
            if let Some(dir) = &args.variants {
                let mut entries: Vec<_> = std::fs::read_dir(dir)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                    .collect();
                entries.sort();
                for path in entries {
                    let name = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("variant")
                        .to_string();
                    let config = base.with_overlay_file(&path)?;
                    variants.push(Variant { name, config });
                }
            }
            let seeds: Vec<u64> = (0..args.seeds).collect();
            let table = run_harness(&base, &variants, &seeds)?;
            table.write_files(&args.out, &args.out_md)?;
            print!("{}", table.to_markdown());
            println!(
                "wrote {} and {}",
                args.out.display(),
                args.out_md.display()
            );
        }
        Some(Command::ExportHoldout(args)) => {
            let cfg = load_config(None, args.stream_config.as_deref())?;
            let stream = cfg.stream.resolved().map_err(anyhow::Error::from)?;
            let examples = holdout_set(&stream, args.task, args.n_per_class)?;
            export_holdout_csv(&args.out, &examples)?;
            println!("wrote {} examples to {}", examples.len(), args.out.display());
        }
    }
    Ok(())
}

//! `elmm` command-line entry point.
//!
//! Exit codes: 0 on success, 1 when the configuration or arguments fail
//! validation, 2 when a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use elmm::experiment::{commands, ExperimentConfig, Workspace};

#[derive(Parser, Debug)]
#[command(name = "elmm", about = "Multimodal knowledge graph completion experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON). The built-in desk config is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization, training and benchmarking.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory all artifacts are read from and written to.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Dotted-path override, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved config.
    Config,
    /// Generate the synthetic dataset.
    GenData,
    /// Train a model and write the checkpoint and per-epoch log.
    Train,
    /// Per-layer attention input/output similarity.
    Profile {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Prune, compensate and fine-tune the trained checkpoint.
    Prune,
    /// Rank the test split.
    Eval {
        /// Checkpoint to score; defaults to the pruned one when present.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Unfiltered ranking.
        #[arg(long)]
        raw: bool,
    },
    /// Forward latency of the trained against the pruned checkpoint.
    Bench,
    /// Train and evaluate every ablation variant.
    Ablate,
    /// Prune the trained checkpoint at every depth and evaluate each.
    Sweep,
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.sets)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: &Command, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ws = Workspace::new(out, &cfg.paths);
    match command {
        Command::Config => println!("{}", serde_json::to_string_pretty(cfg)?),
        Command::GenData => {
            let dir = commands::gen_data(cfg, &ws)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train => {
            let log = commands::train(cfg, &ws)?;
            if let Some(last) = log.last() {
                println!(
                    "trained {} epochs, final loss {:.4}, dev hits@10 {}",
                    last.epoch,
                    last.loss,
                    last.dev_hits10.map_or("n/a".into(), |h| format!("{h:.4}"))
                );
            }
        }
        Command::Profile { checkpoint } => {
            let p = commands::profile(cfg, &ws, checkpoint.as_deref())?;
            for (l, v) in p.layers.iter().enumerate() {
                println!("layer {l}: {v:.6}");
            }
        }
        Command::Prune => {
            let out = commands::prune(cfg, &ws)?;
            println!("pruned layers {:?}", out.plan.layers);
            for e in &out.plan.entries {
                println!(
                    "layer {}: residual {:.6} -> {:.6}",
                    e.layer, e.residual_pre, e.residual_post
                );
            }
        }
        Command::Eval { checkpoint, raw } => {
            let r = commands::eval(cfg, &ws, checkpoint.as_deref(), *raw)?;
            println!(
                "MR {:.3}  Hits@1 {:.4}  Hits@3 {:.4}  Hits@10 {:.4}  ({} queries, {})",
                r.mr,
                r.hits1,
                r.hits3,
                r.hits10,
                r.num_queries,
                if r.filtered { "filtered" } else { "raw" }
            );
        }
        Command::Bench => {
            let r = commands::bench(cfg, &ws)?;
            println!(
                "seq_len {}: speedup {:.3} ± {:.3}, attention FLOP ratio {}",
                r.seq_len, r.speedup, r.speedup_noise, r.attention_flop_ratio
            );
        }
        Command::Ablate => {
            for row in commands::ablate(cfg, &ws)? {
                println!(
                    "{:<12} MR {:>8.3}  Hits@1 {:.4}  Hits@3 {:.4}  Hits@10 {:.4}",
                    row.name, row.mr, row.hits1, row.hits3, row.hits10
                );
            }
        }
        Command::Sweep => {
            for row in commands::sweep(cfg, &ws)? {
                println!("K_p {:>2}: Hits@10 {:.4}  MR {:.3}", row.k_p, row.hits10, row.mr);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match resolve_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("invalid configuration: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.command, &cfg, &cli.common.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

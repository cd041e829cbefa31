//! `mivuln`: dataset construction, evaluation, patching sweep, adversarial
//! generation and attribution analysis as subcommands.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mivuln_core::patching::PositionsPolicy;

use config::{Overrides, RunConfig};
use pipeline::Stage;

#[derive(Debug, Parser)]
#[command(name = "mivuln", version, about = "Locate and explain circuit vulnerabilities in GPT-2 Small")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Curate the candidate vocabulary and sample acronym prompts.
    BuildDataset,
    /// Logit difference and accuracy on the clean dataset.
    Eval,
    /// Resample-ablation sweep over every attention head.
    PatchSweep,
    /// Generate adversarial samples.
    GenAdv,
    /// Letter-distribution shift and attribution of an adversarial set.
    Analyze,
    /// Every stage, in order.
    All,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dataset size, or sweep size for `patch-sweep`.
    #[arg(long, global = true)]
    n_samples: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    kappa: Option<f64>,
    #[arg(long, global = true)]
    target_count: Option<usize>,
    #[arg(long, global = true, value_parser = ["last", "all"])]
    positions: Option<String>,
    /// Letter to analyze; repeatable.
    #[arg(long = "letter", global = true)]
    letters: Vec<char>,
}

fn run(cli: Cli) -> Result<()> {
    let (name, stages): (&str, Vec<Stage>) = match cli.command {
        Command::BuildDataset => ("build-dataset", vec![Stage::BuildDataset]),
        Command::Eval => ("eval", vec![Stage::Eval]),
        Command::PatchSweep => ("patch-sweep", vec![Stage::PatchSweep]),
        Command::GenAdv => ("gen-adv", vec![Stage::GenAdv]),
        Command::Analyze => ("analyze", vec![Stage::Analyze]),
        Command::All => ("all", Stage::ALL.to_vec()),
    };
    let c = cli.common;
    let overrides = Overrides {
        seed: c.seed,
        out: c.out,
        workers: c.workers,
        n_samples: c.n_samples,
        steps: c.steps,
        lr: c.lr,
        kappa: c.kappa,
        target_count: c.target_count,
        positions: c.positions.as_deref().map(str::parse::<PositionsPolicy>).transpose()?,
        letters: c.letters,
    };
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    cfg.apply(&overrides, matches!(stages[..], [Stage::PatchSweep]));
    cfg.finalize()?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .context("configuring worker pool")?;
    }
    pipeline::run(name, &stages, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

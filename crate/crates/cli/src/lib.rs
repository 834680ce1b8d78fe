//! `visprune` command-line front end.
//!
//! Every command loads a TOML run configuration, computes all of its outputs
//! in memory and only then writes them, each file atomically.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use config::{LoadedConfig, Overrides};
use visprune_core::Precision;

#[derive(Debug, Parser)]
#[command(name = "visprune", version, about = "Visual-computation pruning engine, FLOPs model and attention analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated visual-token counts (sweep), or a single count (flops).
    #[arg(long, global = true, value_delimiter = ',')]
    pub nv: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub target_flops: Option<f64>,
    /// Worker threads for sweeps and the solver.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the pruned model on a seeded sample and summarize hidden states.
    Forward,
    /// Distance profile, cross-modal profile and head activity.
    Analyze,
    /// Per-layer, per-term FLOPs of the configured model.
    Flops,
    /// Dense and pruned FLOPs over several visual-token counts.
    Sweep,
    /// All grid configurations within a FLOPs budget.
    Solve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

fn execute(command: Command, c: &LoadedConfig) -> Result<commands::CommandOutput> {
    match command {
        Command::Forward => commands::forward_cmd(c),
        Command::Analyze => commands::analyze_cmd(c),
        Command::Flops => commands::flops_cmd(c),
        Command::Sweep => commands::sweep_cmd(c),
        Command::Solve => commands::solve_cmd(c),
    }
}

/// Run one command end to end; returns the text to print.
pub fn run(cli: Cli) -> Result<String> {
    let path = cli.config.context("--config is required")?;
    let overrides = Overrides {
        output_dir: cli.out,
        precision: cli.precision.map(Into::into),
        seed: cli.seed,
        n_visual: cli.nv,
        target_flops: cli.target_flops,
        workers: cli.workers,
    };
    let loaded = config::load(&path, &overrides)?;
    let result = match loaded.run.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| execute(cli.command, &loaded)),
        None => execute(cli.command, &loaded),
    }?;
    let written = output::write_all(&loaded.run.output_dir, &result.artifacts)?;
    let mut text = result.stdout;
    for p in written {
        text.push_str(&format!("wrote {}\n", p.display()));
    }
    Ok(text)
}

//! `star-prune`: FLOPs reports, pruning runs, sweeps, fixture generation
//! and keep-mask rendering.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.

mod config;
mod fixtures;
mod flops;
mod gen_fixtures;
mod output;
mod prune;
mod sweep;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfig, UsageError};
use output::Output;

#[derive(Parser, Debug)]
#[command(name = "star-prune", version, about = "Two-stage visual token pruning harness")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress the stdout summary.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytical FLOPs report for a schedule or budget target.
    Flops(flops::FlopsArgs),
    /// Run one schedule on the toy model or a fixture directory.
    Prune(prune::PruneArgs),
    /// Sweep a schedule grid over seeds on the toy model.
    Sweep(sweep::SweepArgs),
    /// Dump seeded toy-model attention and embeddings as STT fixtures.
    GenFixtures(gen_fixtures::GenFixturesArgs),
    /// Render keep masks from a trace.
    Viz(viz::VizArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let dir = cli.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let out = Output::create(dir, cli.quiet)?;
    match &cli.command {
        Command::Flops(a) => flops::run(a, &cfg, &out),
        Command::Prune(a) => prune::run(a, &cfg, &out),
        Command::Sweep(a) => sweep::run(a, &cfg, &out),
        Command::GenFixtures(a) => gen_fixtures::run(a, &cfg, &out),
        Command::Viz(a) => viz::run(a, &cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

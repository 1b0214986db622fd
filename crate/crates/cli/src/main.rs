//! `dsm`: runs, verification suites and convergence studies from a TOML config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::Outcome;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dsm", version, about = "Regularized Newton iteration for monotone ill-posed equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides output.dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides problem.seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Turns on diagnostics (V_n per step and the invariant checks).
    #[arg(long)]
    diagnostics: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Iterate until the configured stopping rule fires.
    Run(Common),
    /// Check every verifiable property on the configured problem.
    Verify(Common),
    /// Repeat the run over decreasing noise levels.
    Study {
        #[command(flatten)]
        common: Common,
        /// Strictly decreasing noise levels, comma separated.
        #[arg(long, value_delimiter = ',')]
        deltas: Vec<f64>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(dir) = &common.out_dir {
        cfg.output.dir = dir.clone();
    }
    if let Some(seed) = common.seed_override {
        cfg.problem.seed = seed;
    }
    if common.diagnostics {
        cfg.run.diagnostics = true;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Run(common) => commands::cmd_run(&load(&common)?),
        Command::Verify(common) => commands::cmd_verify(&load(&common)?),
        Command::Study { common, deltas } => {
            let cfg = load(&common)?;
            let deltas = if deltas.is_empty() { cfg.study.deltas.clone() } else { deltas };
            commands::cmd_study(&cfg, &deltas)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSM_LOG", "warn")).init();
    match dispatch(Cli::parse()) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Incomplete) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {}", commands::render(&e));
            ExitCode::from(1)
        }
    }
}

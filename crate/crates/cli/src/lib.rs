//! Experiment runners behind the `affinitynet` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::{load, Overrides};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "affinitynet", version, about = "AffinityNet experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Few-shot run on four Gaussian clusters with forty noise columns.
    Synthetic(Common),
    /// Test AMI over a grid of labeled fractions.
    Classify(Common),
    /// Spectral clustering of learned representations against raw features.
    Cluster(Common),
    /// Cox head training, risk groups, log-rank test and Kaplan–Meier tables.
    Survival(Common),
    /// Finite-difference checks of every layer and loss.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; missing keys take built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if needed).
    #[arg(long, default_value = "affinitynet-out")]
    pub out: PathBuf,
    /// Repetitions (random instances per check for `gradcheck`).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Exit with status 3 when a threshold check fails.
    #[arg(long)]
    pub assert: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            reps: self.reps,
        }
    }
}

/// Loads the config for `command` and runs it.
pub fn run(command: &Command) -> CliResult<(Outcome, bool)> {
    fn go<C: config::CommandConfig>(
        c: &Common,
        f: impl FnOnce(&C, &Path) -> CliResult<Outcome>,
    ) -> CliResult<(Outcome, bool)> {
        let config: C = load(c.config.as_deref(), c.overrides())?;
        Ok((f(&config, &c.out)?, c.assert))
    }
    match command {
        Command::Synthetic(c) => go(c, commands::synthetic),
        Command::Classify(c) => go(c, commands::classify),
        Command::Cluster(c) => go(c, commands::cluster),
        Command::Survival(c) => go(c, commands::survival),
        // Gradient checks always enforce their tolerance.
        Command::Gradcheck(c) => go(c, commands::gradcheck).map(|(o, _)| (o, true)),
    }
}

/// Runs the parsed command line and returns the process exit status.
pub fn main_with(cli: &Cli) -> i32 {
    match run(&cli.command) {
        Ok((outcome, enforce)) => {
            for c in &outcome.checks {
                println!("{}\t{}\t{}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if enforce && !outcome.passed() {
                3
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

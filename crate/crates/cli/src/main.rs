//! `fedsketch` experiment driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure. Errors
//! are reported as one JSON line on stderr.

mod commands;
mod config;
mod error;
mod genie;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Mode;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "fedsketch", version, about = "Adaptive sketching for private federated mean estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Overrides the `output` path from the file.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Federated mean estimation, one CSV row per seed.
    Fme(RunArgs),
    /// Federated averaging, one CSV row per seed and round.
    Fedopt(RunArgs),
    /// Grid over c0 or fixed compression rates, with a summary CSV.
    Sweep(RunArgs),
    /// Runs whichever mode the file's `mode` key names.
    Run(RunArgs),
    /// Fast built-in invariant checks.
    Selftest,
}

fn run_config(args: &RunArgs, mode: Option<Mode>) -> Result<(), CliError> {
    let (mode, mut cfg) = config::load(&args.config, mode)?;
    if let Some(o) = &args.output {
        cfg.output = o.clone();
    }
    match mode {
        Mode::Fme => commands::fme(&cfg),
        Mode::Fedopt => commands::fedopt(&cfg),
        Mode::Sweep => commands::sweep(&cfg),
    }
}

fn selftest() -> Result<(), CliError> {
    let checks = fedsketch::selftest::run_all();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(fedsketch::Error::InvalidMetric(format!("selftest failed: {}", failed.join(", "))).into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fme(a) => run_config(a, Some(Mode::Fme)),
        Command::Fedopt(a) => run_config(a, Some(Mode::Fedopt)),
        Command::Sweep(a) => run_config(a, Some(Mode::Sweep)),
        Command::Run(a) => run_config(a, None),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            e.exit_code()
        }
    }
}

//! Command-line harness for the stochastic delay equation engine.
//!
//! Three subcommands: `run <config>` executes a declared experiment and
//! persists its artifacts plus a manifest, `validate <config>` schema-checks
//! a config without running anything, and `plotdata <report.json>` flattens
//! a result JSON into plot-ready CSVs. Exit codes: 0 on success (the verdict,
//! including `fail` or `inconclusive`, lives in the report), 2 on schema
//! errors, 3 on numerical divergence, 1 on I/O or internal failures.

mod config;
mod plotdata;
mod run;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "ergo-sfde", version, about = "Delay-equation simulation and ergodicity checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment declared in a config file.
    Run {
        /// Path to the config file.
        config: PathBuf,
    },
    /// Parse and schema-check a config file without running it.
    Validate {
        /// Path to the config file.
        config: PathBuf,
    },
    /// Flatten a result JSON into plot-ready CSV files next to it.
    Plotdata {
        /// Path to a report/fit JSON produced by `run`.
        report: PathBuf,
    },
}

/// Applies the `ERGO_SFDE_WORKERS` override before any parallel work starts.
/// Results are byte-identical for every worker count; the variable only
/// bounds CPU use.
fn configure_workers() -> Result<(), String> {
    match std::env::var("ERGO_SFDE_WORKERS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| format!("ERGO_SFDE_WORKERS expects a positive integer, got '{raw}'"))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| format!("cannot configure {n} workers: {e}"))
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(msg) = configure_workers() {
        eprintln!("config error: {msg}");
        std::process::exit(2);
    }
    let code = match cli.command {
        Command::Run { config } => run::run_command(&config),
        Command::Validate { config } => run::validate_command(&config),
        Command::Plotdata { report } => plotdata::plotdata_command(&report),
    };
    std::process::exit(code);
}

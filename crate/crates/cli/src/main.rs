//! Command-line driver for the experiments.
//!
//! Subcommands: `gen-data`, `milr`, `sweep`, `sharpness`, `frob-mc`,
//! `theory-check`, `eos`, `fit`. Every command accepts `--seed`, `--out`, and
//! `--config <key=value file>`, writes a CSV whose leading `#` comment lines
//! record the resolved configuration, and exits with 0 on success, 1 on
//! config errors, 2 on data errors, 3 on numerical failures.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;
mod kv;

#[derive(Parser)]
#[command(name = "milr", version, about = "maximal initial learning rate laboratory")]
pub struct Cli {
    /// Master seed for all derived randomness.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file (CSV or dataset cache).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Key-value config file overriding command defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct DataArg {
    /// Dataset cache file produced by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a Gaussian classification dataset cache.
    GenData,
    /// Estimate the maximal initial learning rate for one architecture.
    Milr(DataArg),
    /// Run the (depth, width, seed) grid: eta* and sharpness per row.
    Sweep(DataArg),
    /// Sharpness at initialization over seeds for one architecture.
    Sharpness(DataArg),
    /// Monte-Carlo E||H||_F^2 for scalar-output theory-mode networks.
    FrobMc,
    /// Recursion-vs-Monte-Carlo report for the Y-quantities.
    TheoryCheck,
    /// Edge-of-stability experiment: full-batch GD sharpness trajectories.
    Eos(DataArg),
    /// Log-log power-law fit over sweep rows.
    Fit {
        /// Sweep rows CSV produced by `sweep`.
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's own help/version exits are success; usage errors are
            // config errors under the documented exit-code scheme
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `driftsim`: path generation, training, evaluation, ablation and benchmarks.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 malformed input
//! data (checkpoint, path file), 4 runtime failure (I/O, locked output).

mod bench;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "driftsim",
    version,
    about = "Drift control simulation, training and evaluation"
)]
pub struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides run.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Config override applied after the file, e.g. `--set trainer.n_envs=256`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a reference path as waypoint CSV.
    GenPath {
        /// circle, eight, variable, rings or random.
        kind: String,
        #[arg(long, allow_hyphen_values = true)]
        radius: Option<f64>,
        /// 1 counter-clockwise, -1 clockwise (circle only).
        #[arg(long, allow_hyphen_values = true)]
        direction: Option<i32>,
        /// Output file name inside --out (default: <kind>.csv).
        #[arg(long)]
        name: Option<String>,
    },
    /// Train a policy with PPO.
    Train,
    /// Evaluate a checkpoint with deterministic rollouts.
    Eval {
        /// Policy checkpoint written by `train` or `ablate`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Path kind or waypoint CSV (default: eval.path).
        #[arg(long)]
        path: Option<String>,
        /// Number of trials (default: eval.n_trials).
        #[arg(long)]
        trials: Option<usize>,
        /// Sample actions instead of using the policy mean.
        #[arg(long)]
        stochastic: bool,
        /// Step cap per trial (default: derived from the path length).
        #[arg(long)]
        max_steps: Option<usize>,
        /// Skip the SVG figures.
        #[arg(long)]
        no_plots: bool,
    },
    /// Train and evaluate the randomization ablation.
    Ablate,
    /// Measure batched stepping throughput.
    Bench {
        /// Steps per measurement.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,64,1024,8192")]
        instances: Vec<usize>,
    },
}

/// Error with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: 3,
            msg: msg.into(),
        }
    }
    pub fn runtime(msg: impl Into<String>) -> Self {
        Self {
            code: 4,
            msg: msg.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

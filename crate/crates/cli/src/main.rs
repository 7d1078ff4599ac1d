//! `fglasso`: simulate, fit, tune, backtest and Monte Carlo from JSON configs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver
//! non-convergence or failed windows (outputs are still written and the
//! manifest says which).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fglasso::Error;

#[derive(Parser)]
#[command(
    name = "fglasso",
    version,
    about = "Sparse-plus-low-rank forecast combination"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed of `simulate` and `mc`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true, env = "FGLASSO_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one panel from a simulation design.
    Simulate,
    /// Estimate combination weights on a whole panel.
    Fit,
    /// Rolling-window evaluation of several methods.
    Backtest,
    /// Monte Carlo over a grid of sample sizes.
    Mc,
    /// Tuning-criterion values over the parameter grid.
    Tune,
}

/// A failed run and its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: msg.into(),
        }
    }

    pub fn output(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: msg.into(),
        }
    }

    pub fn from_core(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::Unsupported(_) => Failure::config(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot start {} threads: {e}", cli.threads)))?;
    }
    let config = cli.config.as_deref();
    let out = cli.out_dir.as_path();
    let status = match cli.command {
        Command::Simulate => commands::simulate(config, cli.seed, out)?,
        Command::Fit => commands::fit(config, out)?,
        Command::Backtest => commands::backtest(config, out)?,
        Command::Mc => commands::mc(config, cli.seed, out)?,
        Command::Tune => commands::tune(config, out)?,
    };
    Ok(if status.degraded() { 4 } else { 0 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => {
            eprintln!("warning: some fits did not converge or failed; see manifest.json");
            ExitCode::from(code)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

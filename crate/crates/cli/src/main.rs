//! `boltzflow`: train, sample, evaluate and the 1D teleportation study.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use boltzflow::Error;
use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(e: Error) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn runtime(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }

    /// Configuration problems found by the core library keep exit code 2.
    pub fn from_core(e: Error) -> Self {
        match e {
            Error::Config(_) => Self::config(e),
            other => Self::runtime(other),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Any scalar config key can also be set with `--dotted.key=value`.
#[derive(Debug, Parser)]
#[command(name = "boltzflow", version, about = "Energy-interpolation samplers for Boltzmann densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model; writes checkpoint.bcrv and loss.csv.
    Train,
    /// Draw samples with log-densities and log-weights; writes samples.csv.
    Sample,
    /// Repeated ESS / NLL / energy-distance evaluation; writes metrics.csv and metrics.json.
    Evaluate,
    /// Exact density and velocity-norm curves of the 1D linear interpolation.
    Teleport,
}

fn run() -> Result<(), CliError> {
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = config::split_overrides(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(e.to_string().trim_end().to_string())),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let shortcuts = config::Shortcuts { config: cli.config.as_deref(), seed: cli.seed, out: cli.out.as_deref() };
    let cfg = config::load(&shortcuts, &overrides)?;
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Sample => commands::sample(&cfg),
        Command::Evaluate => match commands::evaluate(&cfg)? {
            0 => Ok(()),
            k => Err(CliError::Runtime(format!("{k} of {} evaluation repeats failed", cfg.evaluate.repeats))),
        },
        Command::Teleport => commands::teleport(&cfg),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("boltzflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

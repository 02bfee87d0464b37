//! `implicit-eq`: condition checks, training, sweeps and gradient checks for ReLU implicit
//! networks, driven by a JSON run configuration.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error, 3 well-posedness error,
//! 4 training halt.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use implicit_eq::trainer::Mode;
use implicit_eq::Error;

use config::RunConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "IMPLICIT_EQ_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("output error: {0}")]
    Output(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Output(_) => 2,
            CliError::Core(e) => match e {
                Error::GammaTooLarge { .. } | Error::NonContractive { .. } | Error::InvalidParams(_) | Error::Singular => 3,
                Error::NotConverged { .. } | Error::UnconvergedAdjoint { .. } => 4,
                Error::DegenerateFeatures { .. }
                | Error::BetaCapExceeded { .. }
                | Error::KinkProximity { .. }
                | Error::NegativeEntries { .. }
                | Error::ShapeError { .. } => 1,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Strict,
    Experiment,
}

#[derive(Debug, Parser)]
#[command(name = "implicit-eq", version, about = "ReLU implicit networks: certified initialization and implicit-gradient training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Solver regime (overrides `train.mode`).
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Worker threads for sweeps and finite differences.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate the convergence conditions at initialization and print the report.
    CheckInit,
    /// Train and write the per-epoch log.
    Train,
    /// Train one identity-initialized cell per swept value.
    Sweep,
    /// Compare implicit gradients against the dense, finite-difference and unrolled oracles.
    GradCheck,
}

/// Command-line overrides resolved against the configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub out: PathBuf,
    pub mode: Option<Mode>,
    pub parallel: usize,
}

fn load(cli: &Cli) -> Result<(RunConfig, Settings), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse("{}")?,
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}: not an unsigned integer: {raw:?}")))?;
    }
    cfg.validate()?;
    if cli.parallel == 0 {
        return Err(CliError::Config("--parallel: must be at least 1".into()));
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let settings = Settings {
        out,
        mode: cli.mode.map(|m| match m {
            ModeArg::Strict => Mode::Strict,
            ModeArg::Experiment => Mode::Experiment,
        }),
        parallel: cli.parallel,
    };
    Ok((cfg, settings))
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    let (cfg, settings) = load(cli)?;
    if settings.parallel > 1 {
        // Finite differences and spectral estimates use the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(settings.parallel).build_global();
    }
    match cli.command {
        Command::CheckInit => commands::check_init(&cfg, &settings),
        Command::Train => commands::train(&cfg, &settings),
        Command::Sweep => commands::sweep(&cfg, &settings),
        Command::GradCheck => commands::grad_check_cmd(&cfg, &settings),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

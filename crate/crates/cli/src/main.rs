//! `stlab`: batch runner for population generation, expansion certificates,
//! theorem checks, self-training experiments and margin readouts.
//!
//! Exit codes: 0 success, 2 invalid config, 3 refused precondition,
//! 4 internal failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod io;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use stlab::LabError;

#[derive(Parser, Debug)]
#[command(name = "stlab", version, about = "Expansion and self-training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every subcommand. Flags override config values.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config for the subcommand
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores); never changes results
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    #[default]
    Exhaustive,
    Sampled,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a population file
    Gen(commands::gen::GenArgs),
    /// Certify or refute an expansion property
    Expansion,
    /// Check the accuracy guarantees on finite instances
    VerifyTheorems,
    /// Self-training experiments (denoising, ablation ladder)
    Selftrain,
    /// All-layer margins, lower bounds and generalization terms
    Margins,
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Refused(String),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Refused(_) => 3,
            Failure::Internal(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Refused(m) => write!(f, "refused: {m}"),
            Failure::Internal(e) => write!(f, "internal error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::DimensionMismatch { .. }
            | LabError::InvalidPopulation(_)
            | LabError::InvalidArgument(_)
            | LabError::IndexOutOfRange { .. } => Failure::Config(e.to_string()),
            LabError::TooLarge { .. } | LabError::BudgetExceeded(_) | LabError::Precondition(_) => {
                Failure::Refused(e.to_string())
            }
            LabError::Diverged { .. } => Failure::Internal(e.into()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Config(format!("--jobs: {e}")))?;
    let common = cli.common;
    pool.install(|| match cli.command {
        Command::Gen(args) => commands::gen::run(&common, &args),
        Command::Expansion => commands::expansion::run(&common),
        Command::VerifyTheorems => commands::verify::run(&common),
        Command::Selftrain => commands::selftrain::run(&common),
        Command::Margins => commands::margins::run(&common),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("stlab: {f}");
            ExitCode::from(f.code())
        }
    }
}

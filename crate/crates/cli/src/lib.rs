//! Command-line driver: teacher pretraining, reconstruction, diagnostics,
//! task-incremental runs, adapter demos and report generation.
//!
//! Every command validates its inputs before touching the filesystem and
//! maps failures onto a small set of exit codes (see [`CliError::code`]).

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use recast_core::config::{load_run_config, RunConfig};
use recast_core::til::TrainMode;
use recast_core::RecastError;

mod commands;
pub mod report;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_BUDGET: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<RecastError> for CliError {
    fn from(e: RecastError) -> Self {
        let code = match e {
            RecastError::Budget { .. } => EXIT_BUDGET,
            RecastError::Numerical(_) | RecastError::NonFinite { .. } | RecastError::UndefinedMetric(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "recast", version, about = "Template-bank weight reconstruction and task-incremental adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Smoothl1,
    Mse,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense teacher on task 0 of the configured suite.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit templates and coefficients to a dense teacher.
    Reconstruct {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        /// Output directory; falls back to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// Coefficient noise scale; any positive value enables noise.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-group template diversity, entropy and coefficient similarity.
    Diag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the suite's tasks in sequence and snapshot each one.
    Til {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// coefficients-head, head-only or full.
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attach the configured adapter to every module and export dense weights.
    Combine {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Collect the CSVs of a run directory into a markdown report.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Pretrain { config, out, seed } => commands::pretrain(&load_config(config.as_deref(), seed)?, &out, stdout),
        Command::Reconstruct {
            config,
            teacher,
            out,
            loss,
            sigma,
            epochs,
            lr,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            let overrides = commands::MimicryOverrides { loss, sigma, epochs, lr };
            overrides.apply(&mut cfg)?;
            let out = output_dir(out, &cfg)?;
            let threads = threads_from_env()?;
            commands::reconstruct(&cfg, &teacher, &out, threads, stdout)
        }
        Command::Diag { model, out } => commands::diag(&model, &out, stdout),
        Command::Til {
            config,
            model,
            mode,
            budget,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), None)?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            if budget.is_some() {
                cfg.budget = budget;
            }
            let out = output_dir(out, &cfg)?;
            commands::til(&cfg, &model, &out, stdout)
        }
        Command::Combine { config, model, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let out = output_dir(out, &cfg)?;
            commands::combine(&cfg, &model, &out, stdout)
        }
        Command::Report { run_dir, out } => report::cmd_report(&run_dir, &out, stdout),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let cfg = match path {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::usage(format!("config file not found: {}", p.display())));
            }
            load_run_config(p)?
        }
        None => RunConfig::default(),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(out: Option<PathBuf>, cfg: &RunConfig) -> CliResult<PathBuf> {
    out.or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::usage("no output directory: pass --out or set output_dir in the config"))
}

/// `RECAST_THREADS`, defaulting to 1.
pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var("RECAST_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::usage(format!("RECAST_THREADS must be an integer ≥ 1, got {v:?}"))),
        },
    }
}

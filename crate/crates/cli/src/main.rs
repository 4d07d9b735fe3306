//! `urnlab`: spectra, exact oracle checks, FCLT ensembles and raw
//! trajectories for multicolor urn models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SPECTRAL: u8 = 3;
pub const EXIT_IO: u8 = 4;

const AFTER_HELP: &str = "\
Exit codes:
  0  success, every check passed
  1  a check or statistical test failed
  2  invalid config, flags, horizon or replication count
  3  spectral error (complex spectrum, defective eigenvalue, reducible matrix, ...)
  4  I/O or internal error

Files written by `fclt` into --out-dir:
  report.json     claims, normality entries and run metadata (sorted keys)
  config.json     the run config with every default filled in
  covariance.csv  i,j,s,t,empirical,theory,stderr,z   (gating target)
  moments.csv     statistic,n,value,stderr            (X2/Y2/Z2 probes)
  g_samples.csv   replication,pair,t,g                (with --dump-samples)

Files written by `simulate`:
  trajectory.csv   n,color,w_0..w_{k-1}
  diagnostics.csv  n,Z_i...,X_i/Y_i...   (with --diagnostics)";

#[derive(Debug, Parser)]
#[command(name = "urnlab", version, about = "Multicolor urn models: spectra, oracle checks and FCLT ensembles", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Directory for output files (created if missing).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads [default: available parallelism].
    #[arg(long, env = "URNLAB_WORKERS")]
    workers: Option<usize>,
    /// Overrides master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides replications.
    #[arg(long)]
    replications: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stationary distribution and nonprincipal eigenpairs as JSON.
    Spectrum {
        #[command(flatten)]
        common: Common,
    },
    /// Exact small-horizon checks: martingale identity, normalizer, Kersting
    /// recursion, critical rate, second-moment recursions.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Enumeration depth (overrides the config).
        #[arg(long)]
        horizon: Option<usize>,
        /// Negative control: use an off-by-one normalizer in the martingale check.
        #[arg(long)]
        corrupt_normalizer: bool,
    },
    /// Monte Carlo ensemble of the tail-sum process and all statistical tests.
    Fclt {
        #[command(flatten)]
        common: Common,
        /// Also write every replication's grid values to g_samples.csv.
        #[arg(long)]
        dump_samples: bool,
    },
    /// Raw trajectory of one replication.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trials to run (overrides the config).
        #[arg(long)]
        steps: Option<u64>,
        /// Replication index selecting the random stream.
        #[arg(long, default_value_t = 0)]
        replication: u64,
        /// Also write martingale and scaled-projection diagnostics.
        #[arg(long)]
        diagnostics: bool,
        /// Diagnostics row every this many trials.
        #[arg(long, default_value_t = 1)]
        stride: u64,
    },
}

/// A non-zero exit with a message for stderr.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn spectral(message: impl Into<String>) -> Self {
        Self::new(EXIT_SPECTRAL, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(EXIT_IO, message)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Spectrum { common } => commands::spectrum(&common),
        Command::Verify {
            common,
            horizon,
            corrupt_normalizer,
        } => commands::verify(&common, horizon, corrupt_normalizer),
        Command::Fclt { common, dump_samples } => commands::fclt(&common, dump_samples),
        Command::Simulate {
            common,
            steps,
            replication,
            diagnostics,
            stride,
        } => commands::simulate(&common, steps, replication, diagnostics, stride),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("urnlab: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! Command-line front end: `riccati`, `synthesize`, `game` and `verify`.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 no convergence,
//! 3 inward-pointing check failed (outputs still written), 4 no fixed point,
//! 5 a verification suite failed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use riccati_game::Error;

mod commands;
pub mod manifest;
pub mod verify;

pub use verify::{SuiteReport, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;
pub const EXIT_UNVERIFIED: i32 = 3;
pub const EXIT_NO_FIXED_POINT: i32 = 4;
pub const EXIT_VERIFY_FAILED: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::NoConvergence { .. }
                | Error::NotStabilizable(_)
                | Error::NonFiniteState { .. } => EXIT_NO_CONVERGENCE,
                Error::NoFixedPoint { .. } => EXIT_NO_FIXED_POINT,
                _ => EXIT_CONFIG,
            },
            CliError::Io(_) | CliError::Usage(_) => EXIT_CONFIG,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "riccati-game",
    version,
    about = "Riccati feedback synthesis for state-constrained control"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Problem description (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for random probe points.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Riccati equation for a given alpha policy.
    Riccati(RiccatiArgs),
    /// Stabilizing feedback, closed-loop simulation and value check.
    Synthesize(SynthesizeArgs),
    /// Coupled fixed point and constant-alpha lower bounds.
    Game(GameArgs),
    /// Run invariant suites and report pass/fail.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RiccatiArgs {
    /// Constant alpha level or a CSV file of `s,alpha` rows.
    #[arg(long, default_value = "0")]
    pub alpha: String,
    /// Horizon length past the start time, or `stabilizing`.
    #[arg(long, default_value = "stabilizing")]
    pub horizon: String,
    /// Start time (defaults to grid.t0).
    #[arg(long)]
    pub t: Option<f64>,
    /// Gap tolerance of the horizon-doubling loop.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Initial state, e.g. `0.9` or `0.1,-0.2`.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: String,
    /// Check the inward-pointing condition on the boundary.
    #[arg(long)]
    pub check_ipc: bool,
    /// Boundary sampling density.
    #[arg(long, default_value_t = 64)]
    pub density: usize,
    /// Time samples for the inward-pointing check.
    #[arg(long, default_value_t = 21)]
    pub time_samples: usize,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct GameArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub x0: String,
    /// Fixed-point tolerance on the alpha update.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0.5)]
    pub relaxation: f64,
    /// Largest constant alpha in the lower-bound sweep.
    #[arg(long, default_value_t = 1.0)]
    pub alpha_max: f64,
    /// Number of constant alpha levels in `[0, alpha_max]`.
    #[arg(long, default_value_t = 11)]
    pub alpha_points: usize,
    #[arg(long)]
    pub t: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Riccati,
    Ipc,
    Hjb,
    Oracle,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Boundary sampling density for the ipc suite.
    #[arg(long, default_value_t = 64)]
    pub density: usize,
    /// Random initial states for the ipc suite.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
}

/// Flags that were set, for the manifest.
pub(crate) type Overrides = BTreeMap<String, String>;

/// Parses `args` (including the program name) and runs the command; returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<i32, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Riccati(a) => commands::riccati(&cli.global, a),
        Command::Synthesize(a) => commands::synthesize(&cli.global, a),
        Command::Game(a) => commands::game(&cli.global, a),
        Command::Verify(a) => verify::run(&cli.global, a),
    })
}

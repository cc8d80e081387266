//! Driver behind the `inset` binary.
//!
//! Exit status is 0 on success, 1 for invalid input, configuration or I/O
//! failures, and 2 when an optimization aborts or a gradient check fails.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::Parser;

pub mod commands;
pub mod config;
pub mod output;

use config::{load_config, parse_seeds, Command, JobConfig, Truncation};

/// Environment variable holding the worker pool size.
pub const WORKERS_VAR: &str = "INSET_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad arguments, configuration, input data or I/O.
    Validation(String),
    /// An optimization or a check ran and failed.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Failed(_) => 2,
        }
    }

    pub fn core(e: inset_core::Error) -> Self {
        use inset_core::Error as E;
        match e {
            E::NonFinite { .. } | E::Aborted { .. } | E::FrameAborted { .. } => {
                CliError::Failed(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Validation(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

/// Compose generator outputs and write the results as PNG and CSV.
#[derive(Debug, Parser)]
#[command(name = "inset", version)]
pub struct Args {
    /// Job to run; may instead come from the config file.
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// TOML job file. Missing keys take their defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Seeds such as `0..9` (inclusive) or `1,4,7`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// `none`, `adaptive` or a scalar factor in [0, 1].
    #[arg(long)]
    pub trunc: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write images as raw little-endian f64.
    #[arg(long)]
    pub raw: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

/// Resolve the file and flag layers into one validated configuration.
pub fn effective_config(args: &Args) -> Result<JobConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => JobConfig::default(),
    };
    match (args.command, cfg.command) {
        (Some(a), Some(c)) if a != c => {
            return Err(CliError::Validation(format!(
                "command: `{a}` given, config file says `{c}`"
            )))
        }
        (Some(a), _) => cfg.command = Some(a),
        (None, Some(_)) => {}
        (None, None) if args.print_config => {}
        (None, None) => return Err(CliError::Validation("command: none given".into())),
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s).map_err(|e| CliError::Validation(format!("seeds: {e}")))?;
    }
    if let Some(t) = &args.trunc {
        cfg.truncation =
            Truncation::parse(t).map_err(|e| CliError::Validation(format!("trunc: {e}")))?;
    }
    if let Some(o) = &args.out {
        cfg.output = o.clone();
    }
    cfg.raw |= args.raw;
    cfg.validate()?;
    Ok(cfg)
}

fn workers() -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Validation(format!(
                "{WORKERS_VAR}: `{v}` is not a positive integer"
            ))),
        },
    }
}

/// Run with parsed arguments, returning the process exit status.
pub fn run(args: Args) -> i32 {
    match try_run(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn try_run(args: &Args) -> Result<(), CliError> {
    let cfg = effective_config(args)?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers()? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Validation(format!("worker pool: {e}")))?;
    pool.install(|| commands::execute(&cfg))
}

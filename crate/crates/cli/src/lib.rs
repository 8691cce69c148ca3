//! Batch experiment runner: evaluation tables, bound checks, margin sweeps,
//! ROC exports and dataset dumps, all driven by one flat config file.

use std::fmt;
use std::path::Path;

pub mod commands;
pub mod config;

pub use commands::{cmd_gen_data, cmd_roc, cmd_run, cmd_sweep_gamma, cmd_theorem, RunManifest};
pub use config::{ExperimentConfig, OUTPUT_DIR_ENV};

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Unknown key, bad value or inconsistent settings. `key` is empty when
    /// the problem is not tied to one key.
    Config { key: String, message: String },
    Diverged(String),
    /// At least one bound report is invalid or has a failing bound.
    InvalidTheorem(String),
    Core(openworld::Error),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Diverged(_) => 3,
            CliError::InvalidTheorem(_) => 4,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { key, message } if key.is_empty() => write!(f, "config error: {message}"),
            CliError::Config { key, message } => write!(f, "config error at {key}: {message}"),
            CliError::Diverged(m) => write!(f, "training diverged: {m}"),
            CliError::InvalidTheorem(m) => write!(f, "bound check failed: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<openworld::Error> for CliError {
    fn from(e: openworld::Error) -> Self {
        use openworld::Error as E;
        match e {
            E::Diverged(_) | E::NumericalOverflow => CliError::Diverged(e.to_string()),
            E::InvalidConfig(_) | E::TooFewBaseClasses { .. } | E::SeparationFailed => {
                CliError::Config { key: String::new(), message: e.to_string() }
            }
            other => CliError::Core(other),
        }
    }
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Reads and parses a config file, then applies the output-dir override.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(ExperimentConfig::parse(&text)?.with_env_output_dir())
}

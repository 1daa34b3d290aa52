//! Library side of the `sketchhash` command-line tool.
//!
//! Every subcommand is a plain function here so tests can drive the same code
//! paths as the binary.

use std::path::PathBuf;

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::{EvalSettings, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, bad values, failed checks.
    #[error("{0}")]
    Validation(String),

    #[error("config {}: {reason}", path.display())]
    Config { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] sketchhash_core::Error),
}

impl CliError {
    /// 0 success, 1 validation or check failure, 2 I/O or format error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Config { .. } => 2,
            CliError::Core(e) if e.is_io_or_format() => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

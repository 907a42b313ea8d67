//! Command implementations behind the `epose` binary.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{RunConfig, SweepMatch};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("missing required key `{0}`")]
    MissingKey(String),

    #[error("invalid value `{value}` for key `{key}`: {msg}")]
    InvalidValue { key: String, value: String, msg: String },

    #[error("{}:{line}: {msg}", path.display())]
    Config { path: PathBuf, line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] epose_core::Error),

    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    /// Process exit status: 2 for configuration mistakes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownKey(_)
            | CliError::MissingKey(_)
            | CliError::InvalidValue { .. }
            | CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

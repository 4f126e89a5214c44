//! Error types shared across the simulator.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// A message was addressed to an actor the channel does not know.
    #[error("unregistered actor: {0}")]
    UnregisteredActor(String),

    /// A receive found no matching message (usually a protocol bug).
    #[error("no message available for {actor}{}", filter.as_ref().map(|f| format!(" from {f}")).unwrap_or_default())]
    NoMessage {
        actor: String,
        filter: Option<String>,
    },

    /// Tensor collections with mismatched names, order, or shapes.
    #[error("incompatible parameters: {0}")]
    IncompatibleParams(String),

    /// Violated operation precondition (bad weights, empty inputs, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The synchronous round contract was broken.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A partition spec cannot be satisfied on the given dataset.
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    /// CSV or dataset file could not be parsed.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A configuration value is missing, unknown, or out of range.
    #[error("config error: key `{key}`: {message}")]
    Config { key: String, message: String },

    /// Algorithm registry lookups and registrations.
    #[error("algorithm error: {0}")]
    Algorithm(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("yaml error: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for everything that goes wrong at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Yaml(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

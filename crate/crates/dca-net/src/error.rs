//! Error taxonomy for the whole toolkit.
//!
//! Every fallible public entry point returns [`Error`]. Variants are grouped
//! so the CLI can map them onto stable process exit codes:
//!
//! * configuration problems (bad flag/file, invalid hyperparameters) -> 1
//! * data problems (missing/corrupt volumes, manifests, checkpoints) -> 2
//! * numeric failures (NaN/Inf encountered during optimisation)      -> 3

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: unknown keys, out-of-range hyperparameters,
    /// inconsistent flag combinations.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape mismatch in a public API. Always a caller bug, reported
    /// with both the offending and the expected shape.
    #[error("shape error: {0}")]
    Shape(String),

    /// Broken or missing input data (volumes, manifests, sidecars).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint decode/version failures.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying I/O failure, annotated with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A non-finite value surfaced where the maths requires finite input
    /// (e.g. loss turned NaN mid-training). Carries enough context to locate
    /// the failing step.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Attach a path to a raw `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 1,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

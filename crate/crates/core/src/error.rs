//! Error type shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("covariance factorization failed after jitter ladder (largest jitter {jitter:e})")]
    CholeskyFailure { jitter: f64 },

    #[error(
        "every design location has a single replicate; the noise field is unidentifiable. \
         Add replicates (repeat runs at identical inputs) or set allow_homoskedastic = true"
    )]
    NeedsReplication,

    #[error("simulator failure: {0}")]
    Simulator(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("stale workspace: model fingerprint does not match")]
    StaleWorkspace,

    #[error("resume mismatch: {0}")]
    Resume(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 0 ok, 2 config error, 3 simulator
    /// failure, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::Parse { .. } => 2,
            Error::Simulator(_) => 3,
            Error::CholeskyFailure { .. } | Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}

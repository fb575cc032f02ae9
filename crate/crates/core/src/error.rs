use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:e} below -{bound:e}")]
    NotPsd { eigenvalue: f64, bound: f64 },

    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal mass {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("tensor `{name}` has rank {rank}; input-neuron grouping supports rank <= 2")]
    UnsupportedRank { name: String, rank: usize },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::UnsupportedRank { .. } => 1,
            Error::Format { .. } | Error::Checkpoint(_) | Error::Io(_) => 2,
            _ => 3,
        }
    }

    pub(crate) fn non_finite(location: impl Into<String>) -> Self {
        Error::NonFinite {
            location: location.into(),
        }
    }
}

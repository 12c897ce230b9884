//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A model or training configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A dataset file is malformed; offset points at the first bad byte.
    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// Dataset contents violate an invariant (label range, pixel range).
    #[error("data error: {0}")]
    Data(String),

    /// A run-log file is missing a required column or row.
    #[error("schema error in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    /// Two run logs cannot be compared (epoch ranges differ).
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the merging pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("operand has zero Frobenius norm")]
    ZeroMatrix,

    #[error("invalid checkpoint format: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("checkpoint metadata mismatch: {0}")]
    MetaMismatch(String),

    #[error("no merged vector for module `{0}`")]
    MissingModule(String),

    #[error("merge config has no lambda for block {block}, group `{group}`")]
    MissingConfigCell { block: usize, group: String },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("dataset split is empty")]
    EmptySplit,

    #[error("empty input")]
    EmptyInput,

    #[error("evaluator failed on trial {trial} after {completed} completed trials: {message}")]
    EvaluatorFailure {
        trial: usize,
        completed: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::OutOfRange(_)
            | Error::MetaMismatch(_)
            | Error::MissingModule(_)
            | Error::MissingConfigCell { .. }
            | Error::EmptySplit
            | Error::EmptyInput => 2,
            Error::NotPositiveDefinite { .. }
            | Error::NotSymmetric { .. }
            | Error::DimensionMismatch { .. }
            | Error::NonFinite(_)
            | Error::ZeroMatrix
            | Error::Divergence { .. }
            | Error::EvaluatorFailure { .. } => 3,
            Error::Format(_) | Error::Shape(_) | Error::Io { .. } | Error::Json(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {op} input")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-positive step size delta={value} at index {index}")]
    NonPositiveDelta { index: usize, value: f64 },

    #[error("unknown op `{0}`")]
    UnknownOp(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("padding mask row {row} is not left-padded")]
    NotLeftPadded { row: usize },

    #[error("transient memory budget exceeded: need {requested} bytes, budget {budget}")]
    BudgetExceeded { requested: usize, budget: usize },

    #[error("batch width {got} does not match decode state width {expected}")]
    BatchMismatch { expected: usize, got: usize },

    #[error("loss became non-finite at step {step} (t={tokens})")]
    NanLoss { step: u64, tokens: u64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::Json(_)
                | Error::TokenOutOfRange { .. }
                | Error::NotLeftPadded { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

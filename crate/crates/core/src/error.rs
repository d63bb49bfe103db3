use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("duplicate parameter {0:?}")]
    DuplicateParameter(String),

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("training aborted at step {step}: non-finite loss (flow={flow}, align={align:?})")]
    Diverged {
        step: usize,
        flow: f64,
        align: Option<f64>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training budgets differ across variants: {0}")]
    BudgetMismatch(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("cache file {path}: {msg}")]
    Cache { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Distinct failure kinds of the checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("frozen future-encoder checksum mismatch: header {expected}, computed {found}")]
    EncoderChecksum { expected: String, found: String },
    #[error("malformed checkpoint header: {0}")]
    Malformed(String),
    #[error("{op} requires a stage-{required} init, got stage {found}")]
    Stage {
        op: &'static str,
        required: &'static str,
        found: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

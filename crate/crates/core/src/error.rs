use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("division by zero in strict mode")]
    DivByZero,
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty reduction")]
    EmptyReduction,
    #[error("non-finite value after {0}")]
    NonFinite(&'static str),
    #[error("batch statistics need more than one value per channel")]
    InsufficientBatch,
    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),
    #[error("point projects behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty valid set")]
    EmptyValidSet,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint is missing entries: {}", .0.join(", "))]
    MissingEntries(Vec<String>),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("frozen parameters modified: {}", .0.join(", "))]
    FrozenModified(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

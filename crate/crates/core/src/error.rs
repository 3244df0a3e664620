use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("pinpoint set has an empty {0} side")]
    EmptySide(&'static str),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} out of range (max {max})")]
    LabelOutOfRange { label: usize, max: usize },
    #[error("object label {0} has no identity assigned")]
    UnassignedLabel(usize),
    #[error("invalid identity assignment: {0}")]
    Assignment(String),
    #[error("ID decoder invoked outside training")]
    InvokedAtInference,
    #[error("memory bank is empty")]
    EmptyMemory,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing frame {0}")]
    MissingFrame(usize),
    #[error("palette mismatch in {path}: {reason}")]
    PaletteMismatch { path: PathBuf, reason: String },
    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("length mismatch: {0} results vs {1} ground-truth frames")]
    LengthMismatch(usize, usize),
    #[error("data source is empty")]
    DataSourceEmpty,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("initialization format mismatch: {0}")]
    InitFormatMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png error on {path}: {reason}")]
    Png { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

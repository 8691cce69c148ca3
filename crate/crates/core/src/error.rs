use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("zero-norm embedding")]
    ZeroNormEmbedding,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty support")]
    EmptySupport,
    #[error("empty batch")]
    EmptyBatch,
    #[error("numerical overflow")]
    NumericalOverflow,
    #[error("diverged at epoch {0}")]
    Diverged(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid class space: {0}")]
    InvalidClassSpace(String),
    #[error("prototype separation failed")]
    SeparationFailed,
    #[error("partition is not a disjoint cover of the base classes")]
    InvalidPartition,
    #[error("degenerate score distribution")]
    DegenerateScores,
    #[error("detector rejects all training data")]
    DetectorRejectsAll,
    #[error("not enough base classes: {base} base classes for {folds} folds")]
    TooFewBaseClasses { base: usize, folds: usize },
    #[error("empty score list")]
    EmptyScores,
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

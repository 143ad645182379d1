//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any clcnet operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Input vector too short to be a classification result (n < 2).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Probability vector with negative, all-zero, or otherwise unusable mass.
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    /// A forward pass produced non-finite intermediates.
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    /// An operation that requires at least one element got none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Shallow and deep record sets do not describe the same samples.
    #[error("paired-record mismatch: {0}")]
    PairedRecords(String),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}: {message}")]
    TrainingDiverged { epoch: usize, message: String },

    /// A cross-validation fold is too small to split further.
    #[error("fold too small: {0}")]
    FoldSize(String),

    /// A record file failed to parse; cites the offending line.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The same sample id appears twice in one record file.
    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { line: usize, id: String },

    /// A record's true label does not index its probability vector.
    #[error("label out of range at line {line}: label {label}, dimension {dim}")]
    LabelOutOfRange {
        line: usize,
        label: usize,
        dim: usize,
    },

    /// A weights file was written by an unknown format version.
    #[error("unsupported weights format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// A weights file is structurally inconsistent (truncated, bad shapes).
    #[error("corrupt weights file: {0}")]
    Corruption(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

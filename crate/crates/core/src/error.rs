use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {what} at row {row}, column {col}")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },
    #[error("sample has no visual tokens")]
    EmptyVisual,
    #[error("anchor set is empty")]
    EmptyAnchors,
    #[error("anchor {0} is the zero vector")]
    ZeroAnchor(usize),
    #[error("choice {choice} out of range for group {group} of size {size}")]
    ChoiceOutOfRange {
        group: usize,
        choice: usize,
        size: usize,
    },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("search space of {size} masks exceeds the cap of {cap}")]
    SearchSpaceTooLarge { size: u128, cap: u128 },
    #[error("scorer failed on sample {sample} (candidate {candidate}): {source}")]
    Scorer {
        sample: String,
        candidate: usize,
        #[source]
        source: ScoreError,
    },
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("non-finite training loss at epoch {epoch}, step {step} (ghm {ghm}, cs {cs})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        ghm: f64,
        cs: f64,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures of a single fitness evaluation. Remote failures keep their
/// category so callers can tell transport problems from protocol ones.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScoreError {
    #[error("mask does not fit the partition: {0}")]
    InvalidMask(String),
    #[error("mask retains no tokens")]
    EmptyRetention,
    #[error("sample has no text tokens")]
    NoText,
    #[error("unknown sample {0}")]
    UnknownSample(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("remote error for request {id}: {message}")]
    Remote { id: u64, message: String },
    #[error("timed out after {0:?}")]
    Timeout(std::time::Duration),
}

impl ScoreError {
    pub fn is_remote(&self) -> bool {
        matches!(
            self,
            ScoreError::Transport(_)
                | ScoreError::Malformed(_)
                | ScoreError::Protocol(_)
                | ScoreError::Remote { .. }
                | ScoreError::Timeout(_)
        )
    }
}

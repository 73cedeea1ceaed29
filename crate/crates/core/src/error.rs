use thiserror::Error;

use crate::activation::ActivationKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix must have at least one row and one column")]
    EmptyMatrix,

    #[error("expected {expected} entries for a {rows}x{cols} matrix, got {actual}")]
    EntryCount {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },

    #[error("row {row} has {actual} entries, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid block: {0}")]
    InvalidBlock(String),

    #[error("activation `{activation}` is not supported for {context}")]
    UnsupportedActivation {
        activation: ActivationKind,
        context: &'static str,
    },

    #[error("subset must be nonempty")]
    EmptySubset,

    #[error("index {index} out of range for hidden width {width}")]
    IndexOutOfRange { index: usize, width: usize },

    #[error("duplicate index {0} in subset")]
    DuplicateIndex(usize),

    #[error("hidden width {width} exceeds the exhaustive search limit of {limit}")]
    WidthLimitExceeded { width: usize, limit: usize },

    #[error("subset condition violated: residual {residual:e} exceeds {threshold:e}")]
    ConditionViolated { residual: f64, threshold: f64 },

    #[error("{what} is singular or ill-conditioned (condition number {condition:e})")]
    IllConditioned { what: &'static str, condition: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sample set is empty")]
    EmptySamples,

    #[error("objective became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("internal error: {0}")]
    Internal(String),
}

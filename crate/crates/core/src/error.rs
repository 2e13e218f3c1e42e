//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A vector whose norm is below [`crate::numcore::NORM_EPS`]; `row` is the
    /// offending batch row when the vector came from a matrix.
    #[error("zero-norm vector{}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    ZeroNormVector { row: Option<usize> },

    #[error("empty sequence")]
    EmptySequence,

    #[error("batch too small: need at least 2 rows, got {got}")]
    BatchTooSmall { got: usize },

    #[error("index {index} out of range for {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("graph has {graph_nodes} nodes but batch has {batch_rows} rows")]
    GraphBatchMismatch {
        graph_nodes: usize,
        batch_rows: usize,
    },

    #[error("label {label} out of range for {num_classes} classes at row {row}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },

    #[error("oracle concept ids unavailable in this dataset")]
    OracleUnavailable,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

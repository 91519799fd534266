use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    /// Caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("group {group} is empty: {context}")]
    EmptyGroup { group: usize, context: String },

    #[error("degenerate partition: {0}")]
    DegeneratePartition(String),

    #[error("checkpoint parse error at byte {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },

    #[error("incompatible checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: line {line}: {msg}")]
    CsvRow {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

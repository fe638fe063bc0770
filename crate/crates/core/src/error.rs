use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix needs at least {min_rows} row(s) and {min_cols} column(s), got {rows}x{cols}")]
    BadShape {
        rows: usize,
        cols: usize,
        min_rows: usize,
        min_cols: usize,
    },
    #[error("buffer of length {len} does not fill a {rows}x{cols} matrix")]
    BufferLength {
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite value {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("probability {value} at row {row}, column {col} is outside [0, 1]")]
    ProbabilityRange { row: usize, col: usize, value: f64 },
    #[error("label {label} at position {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("retained rank count k={k} must satisfy 2 <= k <= {m}")]
    BadTopK { k: usize, m: usize },
    #[error("not enough samples: {0}")]
    TooFewSamples(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("sidecar mismatch: {0}")]
    SidecarMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

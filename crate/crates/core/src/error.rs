use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} on line {line} outside 1..={max}")]
    IndexOutOfRange { line: usize, index: usize, max: usize },

    #[error("star center ({x:.2}, {y:.2}) is not on the mask foreground")]
    CenterOutsideMask { x: f64, y: f64 },

    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("instance too large for exhaustive search: {0} assignments")]
    TooLarge(f64),

    #[error("no feasible closed contour")]
    Infeasible,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward already called on this record")]
    RecordConsumed,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed instance: {0}")]
    MalformedInstance(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error on line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate vector: norm {norm:e} below floor {floor:e}")]
    DegenerateVector { norm: f64, floor: f64 },

    #[error("dropout replay mismatch: {0}")]
    Replay(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("average precision undefined: no positive items")]
    UndefinedAp,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

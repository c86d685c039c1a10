use thiserror::Error;

/// Errors produced anywhere in the pipeline, from tensor shape checks to
/// checkpoint decoding.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("capacity error: sequence length {len} exceeds maximum {max}")]
    Capacity { len: usize, max: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Checkpoint tensors do not line up with the model they are loaded into.
    #[error("checkpoint does not match model:\n{}", .0.join("\n"))]
    Mismatch(Vec<String>),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

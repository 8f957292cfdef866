use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum LsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("filter design error: {0}")]
    Design(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("manifest error at {context}: {message}")]
    Manifest { context: String, message: String },

    #[error("transport error after {retries} retries: {message}")]
    Transport { retries: u32, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LsError>;

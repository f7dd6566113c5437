use thiserror::Error;

/// Errors produced anywhere in the analysis and surgery pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("unknown phone symbol `{0}`")]
    UnknownPhone(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("alignment error in utterance `{utterance}`: {reason}")]
    Alignment { utterance: String, reason: String },

    #[error("data error at {location}: {reason}")]
    Data { location: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("label error: {0}")]
    Labels(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(offset: u64, source: std::io::Error) -> Self {
        Error::Io { offset, source }
    }
}

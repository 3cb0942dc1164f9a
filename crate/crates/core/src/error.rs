use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported loss: {0}")]
    UnsupportedLoss(String),

    #[error("unsupported diagnostic: {0}")]
    UnsupportedDiagnostic(String),

    #[error("line {line}: field `{field}`: {message}")]
    Record {
        line: usize,
        field: String,
        message: String,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::UnsupportedLoss(_) => "unsupported-loss",
            Error::UnsupportedDiagnostic(_) => "unsupported-diagnostic",
            Error::Record { .. } => "malformed-record",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

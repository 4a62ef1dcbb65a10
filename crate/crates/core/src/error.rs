use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value fell outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular network: ABCD-to-S conversion denominator is zero")]
    SingularNetwork,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("not enough samples in {region}: need {needed}, have {available}")]
    InsufficientData {
        region: String,
        needed: usize,
        available: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Loss became non-finite during training.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Parse { .. }
                | Error::InsufficientData { .. }
                | Error::Shape(_)
                | Error::ArchitectureMismatch(_)
                | Error::Config(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

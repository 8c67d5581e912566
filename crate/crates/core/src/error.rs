use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants are grouped so the CLI can map them onto exit codes:
/// configuration, data, numeric and verification failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape in {op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("numeric overflow: {op} produced a non-finite value")]
    NumericOverflow { op: &'static str },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}, column {column}: {msg}")]
    Parse {
        row: usize,
        column: String,
        msg: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            msg: msg.into(),
        }
    }

    /// Coarse category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Serde(_) => {
                ErrorKind::Data
            }
            Error::NumericOverflow { .. } | Error::Diverged { .. } => ErrorKind::Numeric,
            Error::GradCheck(_) => ErrorKind::Verification,
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::Tape(_) => {
                ErrorKind::Config
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Verification,
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

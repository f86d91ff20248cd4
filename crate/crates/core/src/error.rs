use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric error at step {step:?}: {msg}")]
    Numeric { step: Option<u64>, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Training { step: u64, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("step {t} out of range for schedule of {total} steps")]
    Range { t: u64, total: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric {
            step: None,
            msg: msg.into(),
        }
    }

    /// Attach a stream step to numeric errors that do not carry one yet.
    pub fn at_step(self, t: u64) -> Self {
        match self {
            Error::Numeric { step: None, msg } => Error::Numeric { step: Some(t), msg },
            other => other,
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Input(_) => "input",
            Error::Degenerate(_) => "degenerate",
            Error::Numeric { .. } => "numeric",
            Error::Training { .. } => "training",
            Error::Contract(_) => "contract",
            Error::Range { .. } => "range",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

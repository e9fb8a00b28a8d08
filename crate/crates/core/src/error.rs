use thiserror::Error;

/// Errors produced anywhere in the audit pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in layer {layer} ({context})")]
    Numerical { layer: usize, context: String },

    #[error("training diverged at epoch {epoch}: {context}")]
    Divergence { epoch: usize, context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error at line {line}, field `{field}`: {message}")]
    Config {
        line: usize,
        field: String,
        message: String,
    },

    #[error("model is not ready: {0}")]
    NotReady(String),

    #[error("{key} = {value}: {source}")]
    Dial {
        key: String,
        value: String,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Dial { source, .. } => source.is_numerical(),
            e => matches!(e, Error::Numerical { .. } | Error::Divergence { .. }),
        }
    }

    /// True for malformed configuration or input files.
    pub fn is_input(&self) -> bool {
        match self {
            Error::Dial { source, .. } => source.is_input(),
            e => matches!(
                e,
                Error::Config { .. } | Error::Parse { .. } | Error::Json(_)
            ),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

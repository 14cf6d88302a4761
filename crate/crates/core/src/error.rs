use thiserror::Error;

/// Unified error type for dataset handling, modelling and training.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value or shape is unusable.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A text input failed to parse; locates the offending field.
    #[error("{file}:{line}: column '{column}': {message}")]
    Parse {
        file: String,
        line: u64,
        column: String,
        message: String,
    },

    /// Input parsed but violates the documented schema.
    #[error("schema violation in {file}: {message}")]
    Schema { file: String, message: String },

    /// A computation produced a non-finite or otherwise unusable value.
    #[error("numeric failure in {context}: {message}")]
    Numeric { context: String, message: String },

    /// A required on-disk artifact is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// A metric has no defined value on the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: msg.into(),
        }
    }

    pub fn schema(file: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            file: file.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

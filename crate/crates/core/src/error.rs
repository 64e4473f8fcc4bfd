use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A MetaImage header or other text format could not be understood.
    #[error("format error in `{key}`: {message}")]
    Format { key: String, message: String },

    #[error("size mismatch: expected {expected} bytes, found {actual}")]
    Size { expected: u64, actual: u64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("invalid annotation: {0}")]
    Annotation(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("case `{case_id}`: {source}")]
    Case {
        case_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Wraps `self` with the id of the case being processed.
    pub fn in_case(self, case_id: impl Into<String>) -> Self {
        Error::Case {
            case_id: case_id.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any case context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Case { source, .. } => source.root(),
            other => other,
        }
    }
}

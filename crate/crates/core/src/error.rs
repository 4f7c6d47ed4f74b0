use std::path::PathBuf;

/// Errors raised by the detection engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A pipeline stage was invoked before the stage it depends on.
    #[error("{0}")]
    Precondition(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Attaches an instance id to the message of a numeric or validation error.
    pub fn for_instance(self, id: &str) -> Self {
        match self {
            Error::Validation(m) => Error::Validation(format!("instance {id}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("instance {id}: {m}")),
            Error::Format(m) => Error::Format(format!("instance {id}: {m}")),
            other => other,
        }
    }

    /// True for errors caused by the filesystem rather than by content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::NotFound(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

/// Errors produced anywhere in the signature pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unsupported format: {0}")]
    Format(String),

    #[error("corrupt input: {0}")]
    Corrupt(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("degenerate orientation: no gradient energy in support window")]
    DegenerateOrientation,

    #[error("empty support: descriptor window lies outside the volume")]
    EmptySupport,

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for bad input, 3 for internal
    /// invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

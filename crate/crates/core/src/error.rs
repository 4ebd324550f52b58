use std::path::PathBuf;

/// Errors produced anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {what} = {index}, valid range {range}")]
    Index {
        what: &'static str,
        index: usize,
        range: String,
    },

    #[error("unknown token id {id} at position {position}")]
    UnknownToken { id: u32, position: usize },

    #[error("sequence of length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("no correct runs: {0}")]
    NoCorrectRuns(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

/// Errors raised by the toolkit. The variants are grouped by the exit code a
/// command-line runner should report for them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("annotation count mismatch in {path}: {frames} frames, {boxes} boxes")]
    AnnotationMismatch {
        path: PathBuf,
        frames: usize,
        boxes: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownKey(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

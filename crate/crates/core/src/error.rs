use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("basis kind `{0}` is not supported here")]
    UnsupportedKind(String),

    #[error("label {label} at row {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad IDX magic 0x{magic:08x}")]
    Format { magic: u32 },

    #[error("{what}: expected {expected} bytes, found {found}")]
    Length {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("missing file {}", .path.display())]
    MissingFile { path: PathBuf },

    #[error("{0}")]
    Consistency(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

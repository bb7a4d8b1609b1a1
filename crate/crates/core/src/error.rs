use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::proposals::BBox;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read directory {}: {source}", path.display())]
    UnreadableDirectory { path: PathBuf, source: io::Error },

    #[error("cannot decode image {}: {message}", path.display())]
    UndecodableImage { path: PathBuf, message: String },

    #[error("video directory {} contains no frames", .0.display())]
    EmptyVideo(PathBuf),

    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("box {bbox:?} lies outside the {width}x{height} frame")]
    BoxOutsideFrame { bbox: BBox, width: u32, height: u32 },

    #[error("not enough cross-video negatives: {0}")]
    NegativeSourceExhausted(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("unknown tap point `{0}` (expected `pool` or `fc`)")]
    UnknownTap(String),

    #[error("k = {k} exceeds database size {size}")]
    KExceedsDatabase { k: usize, size: usize },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::UnreadableDirectory { .. }
            | Error::UndecodableImage { .. }
            | Error::EmptyVideo(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::Checkpoint { .. } => ErrorKind::Io,
            Error::Config(_) | Error::InvalidSpec(_) | Error::UnknownTap(_) => ErrorKind::Config,
            _ => ErrorKind::Runtime,
        }
    }
}

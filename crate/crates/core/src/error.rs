use std::path::PathBuf;

use thiserror::Error;

use crate::FrameId;

pub type Result<T, E = NddError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NddError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("malformed file {path}, line {line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("correlation undefined: descriptor has zero variance")]
    UndefinedCorrelation,

    #[error("frame id {id} is not greater than last stored id {last}")]
    NonMonotonicFrame { id: FrameId, last: FrameId },

    #[error("no query has a ground-truth loop; recall is undefined")]
    NoGroundTruth,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{count} scans but {poses} poses")]
    CountMismatch { count: usize, poses: usize },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: FrameId,
        #[source]
        source: Box<NddError>,
    },
}

impl NddError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NddError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        NddError::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

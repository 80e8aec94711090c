use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training aborted in stage {stage} at step {step}: {reason}")]
    TrainingAborted {
        stage: usize,
        step: usize,
        reason: String,
    },

    #[error("tile grid is missing tile at row {row}, col {col}")]
    MissingTile { row: u32, col: u32 },

    #[error("region {0} has zero area")]
    ZeroArea(u32),

    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    #[error("empty sample")]
    EmptySample,

    #[error("not found: {0}")]
    NotFound(String),

    #[error("revision conflict: expected {expected}, current {current}")]
    RevisionConflict { expected: u64, current: u64 },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

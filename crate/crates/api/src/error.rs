use denerd_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    NotFound,
    /// The caller's revision is stale; refetch and retry.
    Conflict,
    Invalid,
    Internal,
}

/// Error returned by every operation and carried over the wire as JSON.
#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{message}")]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_revision: Option<u64>,
}

impl ApiError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        ApiError {
            kind,
            message: message.into(),
            current_revision: None,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Invalid, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Internal, message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let message = e.to_string();
        let kind = match &e {
            CoreError::NotFound(_) => ErrorKind::NotFound,
            CoreError::RevisionConflict { current, .. } => {
                return ApiError {
                    kind: ErrorKind::Conflict,
                    message,
                    current_revision: Some(*current),
                }
            }
            CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorKind::NotFound,
            CoreError::Image(image::ImageError::IoError(io)) if io.kind() == std::io::ErrorKind::NotFound => ErrorKind::NotFound,
            CoreError::Io { .. } | CoreError::NonFinite { .. } | CoreError::TrainingAborted { .. } => ErrorKind::Internal,
            CoreError::Shape(_)
            | CoreError::InvalidArgument(_)
            | CoreError::MissingTile { .. }
            | CoreError::ZeroArea(_)
            | CoreError::ExtentMismatch(_)
            | CoreError::EmptySample
            | CoreError::Checksum { .. }
            | CoreError::Format { .. }
            | CoreError::Image(_)
            | CoreError::Json(_)
            | CoreError::Csv(_) => ErrorKind::Invalid,
        };
        ApiError::new(kind, message)
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

//! Typed operations shared by the HTTP service, its client and the CLI.

pub mod annotate;
pub mod error;
pub mod ops;
pub mod types;

pub use annotate::AnnotationWorkspace;
pub use error::{ApiError, ApiResult, ErrorKind};
pub use types::*;

pub use denerd_core as core;

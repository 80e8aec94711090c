//! Classical detectors and detection metrics.

pub mod classic;
pub mod metrics;
pub mod tune;

pub use classic::{blob_detect, threshold_detect, watershed_detect, BlobParams, ThresholdParams, WatershedParams};
pub use metrics::{count_offset, evaluate, precision_recall, CurvePoint, EvalReport, ImageEval};
pub use tune::{tune_baselines, TunedBaselines, TuningGrid};

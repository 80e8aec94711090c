//! Wire types. Paths are local to the machine executing the operation.

use std::path::PathBuf;

use denerd_core::baselines::{EvalReport, TuningGrid};
use denerd_core::quantify::{AtlasConfig, DensityGroup, DensityRecord};
use denerd_core::registration::{AffineTransform, PreprocessConfig, RecurrenceRecord, RegistrationConfig};
use denerd_core::section::{Age, Marker, SectionConfig};
use denerd_core::stats::{ClusterAssignment, StatsConfig};
use denerd_core::workbench::{BaselineEvaluation, GtRecord, PipelineConfig, SectionFailure, SyntheticDatasetSpec, SyntheticSceneSpec};
use serde::{Deserialize, Serialize};

fn default_fraction() -> f64 {
    0.5
}

fn default_recurrences() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

// annotations

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub has_expression: bool,
    pub revision: u64,
    pub boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddBoxesRequest {
    /// `[x, y, w, h]` in image pixels.
    pub boxes: Vec<[u32; 4]>,
    pub annotator: String,
    /// Revision the client last saw; a mismatch is a conflict.
    #[serde(default)]
    pub revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoveBoxesRequest {
    pub rect: [u32; 4],
    #[serde(default)]
    pub revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoveBoxesResponse {
    pub removed: usize,
    pub annotations: denerd_core::workbench::ImageAnnotations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRequest {
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `export/` inside the annotation directory.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub train: usize,
    pub test: usize,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportRequest {
    pub gt_path: PathBuf,
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportResponse {
    pub images: usize,
    pub boxes: usize,
}

// generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateCorpusRequest {
    #[serde(default)]
    pub spec: SyntheticSceneSpec,
    pub count: usize,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateCorpusResponse {
    pub images: usize,
    pub boxes: usize,
    pub images_dir: PathBuf,
    pub gt_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateDatasetRequest {
    #[serde(default)]
    pub spec: SyntheticDatasetSpec,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateDatasetResponse {
    pub manifest_path: PathBuf,
    pub truth_path: PathBuf,
    pub sections: usize,
    pub atlases: usize,
}

// detector

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    #[serde(default)]
    pub config: PipelineConfig,
    /// Directory holding `images/`; also the default source of `gt.jsonl`.
    pub corpus_dir: PathBuf,
    /// Training records. Without them `corpus_dir/gt.jsonl` is split by the
    /// configured fraction and seed.
    #[serde(default)]
    pub train_gt: Option<PathBuf>,
    #[serde(default)]
    pub test_gt: Option<PathBuf>,
    pub model_out: PathBuf,
    /// Evaluate on the test records.
    #[serde(default)]
    pub evaluate: bool,
    /// Also tune and evaluate the classical baselines.
    #[serde(default)]
    pub baselines: bool,
    #[serde(default)]
    pub grid: TuningGrid,
    /// Where evaluation tables go; defaults to the model's directory.
    #[serde(default)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub model_path: PathBuf,
    pub checksum: String,
    pub train_images: usize,
    pub test_images: usize,
    /// Mean loss per epoch for each of the four stages.
    pub stage_losses: Vec<Vec<f64>>,
    #[serde(default)]
    pub learned: Option<EvalReport>,
    #[serde(default)]
    pub baselines: Option<BaselineEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub model: PathBuf,
    pub image: PathBuf,
    #[serde(default)]
    pub section: SectionConfig,
    /// Defaults to the image's file stem.
    #[serde(default)]
    pub section_id: Option<String>,
    /// Writes `<id>.png` (map), `<id>.json` (sidecar) and `<id>.jsonl`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub section_id: String,
    pub detections: GtRecord,
    pub centers: usize,
}

// registration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasWarpRequest {
    pub labels: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterRequest {
    /// The section.
    pub fixed: PathBuf,
    /// The reference image paired with the atlas.
    pub moving: PathBuf,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default = "default_recurrences")]
    pub recurrences: usize,
    #[serde(default)]
    pub trace_out: Option<PathBuf>,
    /// Warp this atlas with the selected transform.
    #[serde(default)]
    pub atlas: Option<AtlasWarpRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub records: Vec<RecurrenceRecord>,
    /// 1-based index of the lowest metric.
    pub selected: usize,
    pub metric: f64,
    pub descends_to_selection: bool,
    /// Selected transform between the working images.
    pub working_transform: AffineTransform,
    /// The same transform between the original images.
    pub transform: AffineTransform,
    pub fixed_working: (usize, usize),
    pub moving_working: (usize, usize),
}

// quantification and statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantifyRequest {
    pub map: PathBuf,
    /// Atlas already in the section's frame.
    pub labels: PathBuf,
    pub regions: PathBuf,
    #[serde(default)]
    pub atlas: AtlasConfig,
    pub section: String,
    pub age: Age,
    pub marker: Marker,
    /// Also emit one record per composite region.
    #[serde(default)]
    pub parents: bool,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantifyResponse {
    pub records: Vec<DensityRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRequest {
    pub densities: PathBuf,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub groups: Vec<DensityGroup>,
    pub clusters: Vec<ClusterAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RanksumRequest {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

// pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    /// Manifest file or the directory containing `manifest.json`.
    pub manifest: PathBuf,
    pub model: PathBuf,
    #[serde(default)]
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub sections: usize,
    pub succeeded: Vec<String>,
    pub failures: Vec<SectionFailure>,
    pub clusters: Vec<ClusterAssignment>,
    pub out_dir: PathBuf,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAllRequest {
    #[serde(default)]
    pub config: PipelineConfig,
    pub work_dir: PathBuf,
    /// Generated from the configured dataset spec when absent.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Trained on a generated corpus when absent.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Tune and evaluate the baselines after training.
    #[serde(default)]
    pub baselines: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAllResponse {
    pub manifest_path: PathBuf,
    pub model_path: PathBuf,
    #[serde(default)]
    pub training: Option<TrainResponse>,
    pub run: RunResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub text: String,
}

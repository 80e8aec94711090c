//! Corpus generation, ground-truth exchange, persistence and orchestration.

pub mod annotations;
pub mod brain;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod gt;
pub mod manifest;
pub mod pipeline;
pub mod synthetic;

pub use annotations::{rects_intersect, AnnotatedBox, AnnotationStore, ImageAnnotations, ImageStore};
pub use brain::{generate_brain, region_table, RenderedSection, SectionRenderSpec, SyntheticBrain, SyntheticBrainSpec};
pub use config::PipelineConfig;
pub use corpus::{tile_id, GT_FILE, IMAGES_DIR, MATCH_IOU, evaluate_baselines, evaluate_learned, load_labeled, train_detector, write_corpus, BaselineEvaluation, LabeledImage};
pub use dataset::{generate_dataset, section_id, MANIFEST_FILE, TRUTH_FILE, DatasetTruth, SectionTruth, SyntheticDatasetSpec};
pub use gt::{read_gt, split_records, write_gt, GtRecord};
pub use manifest::{AtlasEntry, DatasetManifest, SectionEntry};
pub use pipeline::{manifest_path, run_pipeline, summarize, REPORT_TABLES, PipelineReport, SectionFailure, Stage};
pub use synthetic::{generate_corpus, generate_scene, SyntheticScene, SyntheticSceneSpec};

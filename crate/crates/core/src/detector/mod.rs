//! Region-proposal neuron detector.

pub mod anchors;
pub mod bbox;
pub mod labeling;
pub mod loss;
pub mod model;
pub mod nms;
pub mod train;

pub use anchors::{generate_anchors, AnchorSet};
pub use bbox::{iou, BoundingBox, Detection, Frame};
pub use labeling::{label_anchors, AnchorLabel, Label, LabelThresholds};
pub use loss::{multitask_loss, LossOutput, Target};
pub use model::{DetectorModel, InferenceConfig, ModelSpec, ProposalConfig};
pub use nms::nms;
pub use train::{four_step_train, AnnotatedTile, TrainingConfig, TrainingReport};

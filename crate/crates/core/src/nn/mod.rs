//! Minimal differentiable layers with a tape-based backward pass.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, Fragment};
pub use ops::{conv2d, linear, max_pool, relu, roi_pool, FeatureWindow, LayerParams, Padding, Stride};
pub use sgd::{sgd_step, MomentumSgd};
pub use tape::{GradientTape, Gradients, LayerHandle, NodeId};
pub use tensor::Tensor;

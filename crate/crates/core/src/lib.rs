//! Neuron detection, atlas registration and regional density statistics for
//! brain-section images.

pub mod baselines;
pub mod detector;
pub mod error;
pub mod nn;
pub mod quantify;
pub mod registration;
pub mod section;
pub mod stats;
pub mod workbench;

pub use error::{Error, Result};

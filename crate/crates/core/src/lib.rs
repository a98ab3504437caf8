//! Unsupervised 3D keypoint detection on point clouds: rotation-invariant
//! local descriptors, saliency and embedding heads, adversarial sparsity
//! control and reconstruction-driven training.

pub mod autograd;
pub mod config;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};

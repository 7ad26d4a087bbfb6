//! Multimodal activity recognition with EmbraceNet feature fusion.
//!
//! Each sensor stream passes through its own 1-D convolutional encoder and a
//! dense docking layer. The embrace layer then picks, for every feature
//! coordinate, exactly one sensor to contribute, drawn from a multinomial
//! distribution. A convolutional head turns the fused features into one class
//! distribution per second of input.

pub mod adam;
pub mod checks;
pub mod cli;
pub mod data;
mod error;
pub mod fusion;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ClassProbabilities, FusionKind, Model, ModelConfig};
pub use tensor::Tensor;

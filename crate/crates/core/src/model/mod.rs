//! Network construction, forward/backward passes and checkpoints.

pub mod checkpoint;
mod config;
mod network;

pub use config::{parse_layers, render_layers, FusionKind, LayerSpec, ModelConfig};
pub use network::{predict, uniform_loss, ClassProbabilities, ForwardPass, MaskSource, Model, Network};

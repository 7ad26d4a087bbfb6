//! Sensor samples, dataset files, and input transforms.

pub mod io;
pub mod rotation;
mod sample;
pub mod synth;
pub mod transform;

pub use io::{filter_invalid, load_dataset, write_dataset, DatasetManifest};
pub use rotation::{
    apply_random_rotation, apply_rotation, draw_rotation, quat_rotate, rotation_matrix, Quaternion, Rotation,
    RotationAngles,
};
pub use sample::{Location, Modality, SensorSample};
pub use synth::{synth_generate, synth_samples, SynthConfig};
pub use transform::{dft_magnitude, fft_transform, InputMode};

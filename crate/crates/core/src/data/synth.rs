//! Synthetic stand-in for recorded sensor data.
//!
//! Each class owns a signature: a sinusoid frequency, and per sensor channel
//! an offset and amplitude. A sample of class `c` is the signature with a
//! random phase per sensor plus Gaussian noise. Orientation follows a class
//! base quaternion wobbling about a class axis at the class frequency.
//! Signatures depend only on `signature_seed`, so splits generated with
//! different `seed`s share the same classes.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::io::write_dataset;
use crate::data::rotation::Quaternion;
use crate::data::{Location, Modality, SensorSample};
use crate::error::{config_err, Result};
use crate::rng::{substream, Rng, Stream};
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 8;
const SAMPLE_RATE_HZ: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub classes: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub seed: u64,
    pub signature_seed: u64,
    pub length: usize,
    pub segments: usize,
    pub split: String,
    pub location: Location,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 64,
            classes: CLASS_COUNT,
            noise: 0.0,
            seed: 0,
            signature_seed: 0,
            length: 500,
            segments: 5,
            split: "train".to_string(),
            location: Location::Hips,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != CLASS_COUNT {
            return Err(config_err!(
                "the model has {CLASS_COUNT} classes, synthetic data cannot use {}",
                self.classes
            ));
        }
        if self.samples == 0 {
            return Err(config_err!("at least one sample is required"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(config_err!("noise must be a finite non-negative number"));
        }
        if self.length == 0 || self.segments == 0 || self.length % self.segments != 0 {
            return Err(config_err!(
                "length {} must be a positive multiple of segments {}",
                self.length,
                self.segments
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ClassSignature {
    frequency: f64,
    /// Per sensor: `(offset, amplitude)` per channel.
    channels: BTreeMap<Modality, Vec<(f64, f64)>>,
    orientation: Quaternion,
    wobble_axis: [f64; 3],
}

fn signatures(cfg: &SynthConfig) -> Vec<ClassSignature> {
    (0..cfg.classes)
        .map(|c| {
            let mut rng = substream(cfg.signature_seed, Stream::Signature, &[c as u64]);
            let channels = Modality::ALL
                .iter()
                .filter(|m| **m != Modality::Orientation)
                .map(|&m| {
                    let per_channel = (0..m.channels())
                        .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(0.3..1.0)))
                        .collect();
                    (m, per_channel)
                })
                .collect();
            let orientation = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalized()
            .unwrap_or(Quaternion::IDENTITY);
            let axis = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
            let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            ClassSignature {
                frequency: 0.6 + 0.45 * c as f64,
                channels,
                orientation,
                wobble_axis: axis.map(|v| v / n),
            }
        })
        .collect()
}

fn render(sig: &ClassSignature, cfg: &SynthConfig, class: usize, rng: &mut Rng) -> SensorSample {
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let omega = TAU * sig.frequency / SAMPLE_RATE_HZ;
    let mut modalities = BTreeMap::new();
    for m in Modality::ALL {
        let phase = rng.random::<f64>() * TAU;
        let ch = m.channels();
        let mut data = Tensor::zeros(&[cfg.length, ch]);
        for t in 0..cfg.length {
            let wave = (omega * t as f64 + phase).sin();
            let row = data.row_mut(t);
            if m == Modality::Orientation {
                let half = 0.15 * wave;
                let [ax, ay, az] = sig.wobble_axis;
                let wobble = Quaternion::new(half.cos(), ax * half.sin(), ay * half.sin(), az * half.sin());
                let mut q = (sig.orientation * wobble).to_array();
                for v in q.iter_mut() {
                    *v += noise.sample(rng);
                }
                let q = Quaternion::from_slice(&q).normalized().unwrap_or(Quaternion::IDENTITY);
                row.copy_from_slice(&q.to_array());
            } else {
                for (v, &(offset, amplitude)) in row.iter_mut().zip(&sig.channels[&m]) {
                    *v = offset + amplitude * wave + noise.sample(rng);
                }
            }
        }
        modalities.insert(m, data);
    }
    let mut sample = SensorSample::new(modalities, Some(vec![class; cfg.segments]));
    sample.location = Some(cfg.location);
    sample
}

/// Generates the samples in memory. Sample `i` has class `i % classes`.
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<SensorSample>> {
    cfg.validate()?;
    let sigs = signatures(cfg);
    Ok((0..cfg.samples)
        .map(|i| {
            let class = i % cfg.classes;
            let mut rng = substream(cfg.seed, Stream::Synth, &[i as u64]);
            render(&sigs[class], cfg, class, &mut rng)
        })
        .collect())
}

/// Generates a dataset and writes it under `dir`; returns the manifest path.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    let samples = synth_samples(cfg)?;
    write_dataset(dir, &cfg.split, cfg.location, &samples)
}

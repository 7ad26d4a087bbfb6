use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{input_err, Error, Result};
use crate::tensor::Tensor;

/// Sensor streams, in the canonical order used for every concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Accelerometer,
    Gravity,
    Gyroscope,
    LinearAccelerometer,
    Magnetometer,
    /// Quaternion `(w, x, y, z)`.
    Orientation,
    Pressure,
}

impl Modality {
    pub const ALL: [Modality; 7] = [
        Modality::Accelerometer,
        Modality::Gravity,
        Modality::Gyroscope,
        Modality::LinearAccelerometer,
        Modality::Magnetometer,
        Modality::Orientation,
        Modality::Pressure,
    ];

    pub fn channels(self) -> usize {
        match self {
            Modality::Orientation => 4,
            Modality::Pressure => 1,
            _ => 3,
        }
    }

    /// Three-axis vector sensors, the ones a frame rotation acts on directly.
    pub fn is_vector(self) -> bool {
        self.channels() == 3
    }

    pub fn key(self) -> &'static str {
        match self {
            Modality::Accelerometer => "acc",
            Modality::Gravity => "gra",
            Modality::Gyroscope => "gyr",
            Modality::LinearAccelerometer => "lacc",
            Modality::Magnetometer => "mag",
            Modality::Orientation => "ori",
            Modality::Pressure => "pressure",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.key() == s.trim())
            .ok_or_else(|| input_err!("unknown modality {s:?}"))
    }
}

/// Phone placement of a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Location {
    Bag,
    Hips,
    Torso,
    Hand,
}

impl Location {
    pub const ALL: [Location; 4] = [Location::Bag, Location::Hips, Location::Torso, Location::Hand];

    pub fn name(self) -> &'static str {
        match self {
            Location::Bag => "Bag",
            Location::Hips => "Hips",
            Location::Torso => "Torso",
            Location::Hand => "Hand",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Location::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| input_err!("unknown location {s:?}"))
    }
}

/// One recording window: a `[time x channels]` array per sensor plus one
/// class label per segment (second).
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSample {
    pub modalities: BTreeMap<Modality, Tensor>,
    pub labels: Option<Vec<usize>>,
    pub location: Option<Location>,
}

impl SensorSample {
    pub fn new(modalities: BTreeMap<Modality, Tensor>, labels: Option<Vec<usize>>) -> Self {
        SensorSample {
            modalities,
            labels,
            location: None,
        }
    }

    pub fn get(&self, modality: Modality) -> Result<&Tensor> {
        self.modalities
            .get(&modality)
            .ok_or_else(|| input_err!("sample has no {modality} data"))
    }

    pub fn get_mut(&mut self, modality: Modality) -> Result<&mut Tensor> {
        self.modalities
            .get_mut(&modality)
            .ok_or_else(|| input_err!("sample has no {modality} data"))
    }

    /// Time length shared by all sensors.
    pub fn len(&self) -> usize {
        self.modalities.values().next().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.modalities.values().all(Tensor::is_finite)
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| input_err!("sample has no labels"))
    }
}

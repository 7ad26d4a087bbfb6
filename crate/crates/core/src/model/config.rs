use std::fmt;
use std::str::FromStr;

use crate::data::{InputMode, Modality};
use crate::error::{config_err, Error, Result};
use crate::fusion::SelectionProbabilities;

/// One convolution of an encoder or head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Output `[time, channels]` the layer must produce; checked at build.
    pub expected: Option<[usize; 2]>,
}

impl LayerSpec {
    pub const fn new(filters: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            filters,
            kernel,
            stride,
            expected: None,
        }
    }

    pub const fn expect(mut self, time: usize, channels: usize) -> Self {
        self.expected = Some([time, channels]);
        self
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.filters, self.kernel, self.stride)
    }
}

/// Parses `filters/kernel/stride`.
impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('/').collect();
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| config_err!("bad layer spec {s:?}, expected filters/kernel/stride"))?;
        match nums[..] {
            [filters, kernel, stride] => Ok(LayerSpec::new(filters, kernel, stride)),
            _ => Err(config_err!("bad layer spec {s:?}, expected filters/kernel/stride")),
        }
    }
}

pub fn render_layers(layers: &[LayerSpec]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionKind {
    /// Stochastic per-coordinate modality selection after docking layers.
    #[default]
    Embrace,
    /// Raw channels concatenated into a single encoder.
    Early,
    /// Encoder features concatenated before the head.
    Intermediate,
    /// One full model per sensor, softmax outputs averaged.
    Late,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Embrace => "embrace",
            FusionKind::Early => "early",
            FusionKind::Intermediate => "intermediate",
            FusionKind::Late => "late",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "embrace" | "embracenet" => Ok(FusionKind::Embrace),
            "early" => Ok(FusionKind::Early),
            "intermediate" => Ok(FusionKind::Intermediate),
            "late" => Ok(FusionKind::Late),
            other => Err(config_err!("unknown fusion {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    /// Time steps per input window.
    pub input_length: usize,
    /// Width `c` of the docking layers.
    pub docking_width: usize,
    pub class_count: usize,
    pub fusion: FusionKind,
    /// Encoder convolutions, shared layout across sensors.
    pub preproc: Vec<LayerSpec>,
    /// Head convolutions; the last one is the kernel-1 classifier.
    pub postproc: Vec<LayerSpec>,
    pub input_mode: InputMode,
    pub selection: SelectionProbabilities,
    /// Expected docking output `[time, c]`.
    pub docking_expected: Option<[usize; 2]>,
}

impl ModelConfig {
    /// The four-layer encoder, 256-wide docking and three-layer head.
    pub fn base() -> Self {
        ModelConfig {
            modalities: Modality::ALL.to_vec(),
            input_length: 500,
            docking_width: 256,
            class_count: 8,
            fusion: FusionKind::Embrace,
            preproc: vec![
                LayerSpec::new(32, 5, 5).expect(100, 32),
                LayerSpec::new(64, 5, 5).expect(20, 64),
                LayerSpec::new(128, 5, 2).expect(10, 128),
                LayerSpec::new(256, 5, 2).expect(5, 256),
            ],
            postproc: vec![
                LayerSpec::new(256, 5, 1).expect(5, 256),
                LayerSpec::new(256, 5, 1).expect(5, 256),
                LayerSpec::new(8, 1, 1).expect(5, 8),
            ],
            input_mode: InputMode::Raw,
            selection: SelectionProbabilities::uniform(7),
            docking_expected: Some([5, 256]),
        }
    }

    /// The ten-layer encoder, 512-wide docking and five-layer head.
    pub fn large() -> Self {
        ModelConfig {
            docking_width: 512,
            preproc: vec![
                LayerSpec::new(32, 5, 1).expect(500, 32),
                LayerSpec::new(32, 5, 5).expect(100, 32),
                LayerSpec::new(64, 5, 1).expect(100, 64),
                LayerSpec::new(64, 5, 5).expect(20, 64),
                LayerSpec::new(128, 5, 1).expect(20, 128),
                LayerSpec::new(128, 5, 2).expect(10, 128),
                LayerSpec::new(256, 5, 1).expect(10, 256),
                LayerSpec::new(256, 5, 2).expect(5, 256),
                LayerSpec::new(512, 5, 1).expect(5, 512),
                LayerSpec::new(512, 5, 1).expect(5, 512),
            ],
            postproc: vec![
                LayerSpec::new(512, 5, 1).expect(5, 512),
                LayerSpec::new(512, 5, 1).expect(5, 512),
                LayerSpec::new(256, 5, 1).expect(5, 256),
                LayerSpec::new(256, 5, 1).expect(5, 256),
                LayerSpec::new(8, 1, 1).expect(5, 8),
            ],
            docking_expected: Some([5, 512]),
            ..ModelConfig::base()
        }
    }

    /// Small network over 20-step windows for gradient checks and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            input_length: 20,
            docking_width: 4,
            preproc: vec![LayerSpec::new(4, 5, 2).expect(10, 4), LayerSpec::new(4, 5, 2).expect(5, 4)],
            postproc: vec![LayerSpec::new(4, 5, 1).expect(5, 4), LayerSpec::new(8, 1, 1).expect(5, 8)],
            docking_expected: Some([5, 4]),
            ..ModelConfig::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "tiny" => Ok(Self::tiny()),
            other => Err(config_err!("unknown model preset {other:?} (base, large, tiny)")),
        }
    }

    /// Restricts the model to `modalities`, resetting `p` to uniform.
    pub fn with_modalities(mut self, modalities: &[Modality]) -> Self {
        self.modalities = modalities.to_vec();
        self.selection = SelectionProbabilities::uniform(modalities.len());
        self
    }

    pub fn with_fusion(mut self, fusion: FusionKind) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_input_mode(mut self, mode: InputMode) -> Self {
        self.input_mode = mode;
        self
    }

    pub fn m(&self) -> usize {
        self.modalities.len()
    }

    /// Channels a sensor contributes to the network input.
    pub fn input_channels(&self, modality: Modality) -> usize {
        modality.channels() * self.input_mode.channel_multiplier()
    }

    /// `key = value` lines; [`ModelConfig::from_echo`] reads them back.
    /// Build-time shape expectations are not part of the echo.
    pub fn echo(&self) -> String {
        let mods: Vec<&str> = self.modalities.iter().map(|m| m.key()).collect();
        let p: Vec<String> = self.selection.as_slice().iter().map(|v| format!("{v:?}")).collect();
        [
            format!("modalities = {}", mods.join(",")),
            format!("input_length = {}", self.input_length),
            format!("docking_width = {}", self.docking_width),
            format!("class_count = {}", self.class_count),
            format!("fusion = {}", self.fusion),
            format!("input_mode = {}", self.input_mode),
            format!("preproc = {}", render_layers(&self.preproc)),
            format!("postproc = {}", render_layers(&self.postproc)),
            format!("selection = {}", p.join(",")),
        ]
        .join("\n")
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::base();
        cfg.docking_expected = None;
        for layer in cfg.preproc.iter_mut().chain(cfg.postproc.iter_mut()) {
            layer.expected = None;
        }
        let mut selection = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("bad config line {line:?}"))?;
            let value = value.trim();
            let int = || value.parse::<usize>().map_err(|_| config_err!("{key} must be an integer"));
            match key.trim() {
                "modalities" => cfg.modalities = value.split(',').map(str::parse).collect::<Result<_>>()?,
                "input_length" => cfg.input_length = int()?,
                "docking_width" => cfg.docking_width = int()?,
                "class_count" => cfg.class_count = int()?,
                "fusion" => cfg.fusion = value.parse()?,
                "input_mode" => cfg.input_mode = value.parse()?,
                "preproc" => cfg.preproc = parse_layers(value)?,
                "postproc" => cfg.postproc = parse_layers(value)?,
                "selection" => {
                    let p = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>().map_err(|_| config_err!("bad probability {v:?}")))
                        .collect::<Result<Vec<_>>>()?;
                    selection = Some(SelectionProbabilities::new(p)?);
                }
                // Run metadata stored alongside the model echo.
                _ => {}
            }
        }
        cfg.selection = selection.unwrap_or_else(|| SelectionProbabilities::uniform(cfg.modalities.len()));
        Ok(cfg)
    }
}

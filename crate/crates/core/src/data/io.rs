//! Plain-text dataset layout.
//!
//! A dataset is a manifest plus one matrix file per sensor. Every line of a
//! sensor file is one sample: `length * channels` whitespace-separated
//! decimals, time-major (all channels of t=0, then t=1, ...). The optional
//! label file has one line per sample with one 1-based class per segment.
//!
//! The manifest is `key = value` text:
//!
//! ```text
//! split = train
//! location = Hips
//! length = 500
//! samples = 64
//! acc = acc.txt
//! gra = gra.txt
//! ...
//! labels = labels.txt
//! ```
//!
//! Relative file paths are resolved against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use crate::data::{Location, Modality, SensorSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LENGTH: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub location: Location,
    /// Time steps per sample.
    pub length: usize,
    pub samples: usize,
    pub files: BTreeMap<Modality, PathBuf>,
    pub labels: Option<PathBuf>,
}

fn manifest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl DatasetManifest {
    /// Parses a manifest file; file paths come back resolved.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut split = None;
        let mut location = None;
        let mut length = DEFAULT_LENGTH;
        let mut samples = None;
        let mut files = BTreeMap::new();
        let mut labels = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let format = |message: String| Error::Format {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "split" => split = Some(value.to_string()),
                "location" => location = Some(value.parse().map_err(|e: Error| format(e.to_string()))?),
                "length" | "samples" => {
                    let v: usize = value
                        .parse()
                        .map_err(|_| format(format!("{key} must be a non-negative integer")))?;
                    if key == "length" {
                        length = v;
                    } else {
                        samples = Some(v);
                    }
                }
                "labels" => labels = Some(base.join(value)),
                other => {
                    let modality: Modality = other
                        .parse()
                        .map_err(|_| format(format!("unknown key {other:?}")))?;
                    files.insert(modality, base.join(value));
                }
            }
        }
        let manifest = DatasetManifest {
            split: split.ok_or_else(|| manifest_err(path, "missing key `split`"))?,
            location: location.ok_or_else(|| manifest_err(path, "missing key `location`"))?,
            length,
            samples: samples.ok_or_else(|| manifest_err(path, "missing key `samples`"))?,
            files,
            labels,
        };
        if manifest.length == 0 {
            return Err(manifest_err(path, "length must be positive"));
        }
        if let Some(m) = Modality::ALL.iter().find(|m| !manifest.files.contains_key(m)) {
            return Err(manifest_err(path, format!("missing file for sensor {m}")));
        }
        for file in manifest.files.values().chain(&manifest.labels) {
            if !file.is_file() {
                return Err(manifest_err(path, format!("{} does not exist", file.display())));
            }
        }
        Ok(manifest)
    }

    /// Manifest text with paths written relative to `dir` when possible.
    pub fn render(&self, dir: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();
        let mut out = String::new();
        let _ = writeln!(out, "split = {}", self.split);
        let _ = writeln!(out, "location = {}", self.location);
        let _ = writeln!(out, "length = {}", self.length);
        let _ = writeln!(out, "samples = {}", self.samples);
        for (m, p) in &self.files {
            let _ = writeln!(out, "{} = {}", m.key(), rel(p));
        }
        if let Some(p) = &self.labels {
            let _ = writeln!(out, "labels = {}", rel(p));
        }
        out
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

fn parse_row(path: &Path, line_no: usize, line: &str, expected: usize) -> Result<Vec<f64>> {
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let values = line
        .split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|_| format(format!("cannot parse {tok:?} as a number"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(format(format!("expected {expected} values, found {}", values.len())));
    }
    Ok(values)
}

/// Reads every sample of a dataset in file order. Orientation rows are
/// renormalized to unit quaternions; non-finite values are kept so that
/// [`filter_invalid`] can report them.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<SensorSample>> {
    let mut per_modality = BTreeMap::new();
    for (&modality, path) in &manifest.files {
        per_modality.insert(modality, (path, read_lines(path)?));
    }
    let labels = manifest.labels.as_ref().map(|p| read_lines(p).map(|l| (p, l))).transpose()?;

    let counts = per_modality
        .values()
        .map(|(p, l)| (*p, l.len()))
        .chain(labels.as_ref().map(|(p, l)| (*p, l.len())));
    for (path, count) in counts {
        if count != manifest.samples {
            return Err(manifest_err(
                path,
                format!("{count} rows, manifest declares {}", manifest.samples),
            ));
        }
    }

    let mut samples = Vec::with_capacity(manifest.samples);
    for i in 0..manifest.samples {
        let mut modalities = BTreeMap::new();
        for (&modality, (path, lines)) in &per_modality {
            let ch = modality.channels();
            let row = parse_row(path, i + 1, &lines[i], manifest.length * ch)?;
            let mut data = Tensor::new(vec![manifest.length, ch], row)?;
            if modality == Modality::Orientation {
                renormalize_quaternions(&mut data);
            }
            modalities.insert(modality, data);
        }
        let sample_labels = match &labels {
            Some((path, lines)) => Some(parse_labels(path, i + 1, &lines[i])?),
            None => None,
        };
        let mut sample = SensorSample::new(modalities, sample_labels);
        sample.location = Some(manifest.location);
        samples.push(sample);
    }
    Ok(samples)
}

fn renormalize_quaternions(data: &mut Tensor) {
    for r in 0..data.rows() {
        let row = data.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn parse_labels(path: &Path, line_no: usize, line: &str) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|tok| match tok.parse::<usize>() {
            Ok(v) if v >= 1 => Ok(v - 1),
            _ => Err(Error::Format {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("labels are 1-based class indices, got {tok:?}"),
            }),
        })
        .collect()
}

/// Drops samples holding any non-finite value; returns survivors in order
/// and the number dropped.
pub fn filter_invalid(samples: Vec<SensorSample>) -> (Vec<SensorSample>, usize) {
    let before = samples.len();
    let kept: Vec<_> = samples.into_iter().filter(SensorSample::is_finite).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Writes `samples` under `dir` and returns the manifest path
/// (`<dir>/<split>.manifest`). All samples must carry every sensor and share
/// one length; labels are written only if every sample has them.
pub fn write_dataset(dir: &Path, split: &str, location: Location, samples: &[SensorSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let length = samples.first().map_or(DEFAULT_LENGTH, SensorSample::len);
    let mut files = BTreeMap::new();
    for modality in Modality::ALL {
        let path = dir.join(format!("{split}_{}.txt", modality.key()));
        let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        let mut line = String::new();
        for s in samples {
            let data = s.get(modality)?;
            if data.rows() != length {
                return Err(Error::Input(format!("sample lengths differ ({} vs {length})", data.rows())));
            }
            line.clear();
            for (j, v) in data.data().iter().enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{v}");
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.insert(modality, path);
    }
    let labels = if !samples.is_empty() && samples.iter().all(|s| s.labels.is_some()) {
        let path = dir.join(format!("{split}_labels.txt"));
        let mut text = String::new();
        for s in samples {
            let row: Vec<String> = s.labels()?.iter().map(|l| (l + 1).to_string()).collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Some(path)
    } else {
        None
    };
    let manifest = DatasetManifest {
        split: split.to_string(),
        location,
        length,
        samples: samples.len(),
        files,
        labels,
    };
    let manifest_path = dir.join(format!("{split}.manifest"));
    fs::write(&manifest_path, manifest.render(dir)).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

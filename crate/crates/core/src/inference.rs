//! Self-ensemble prediction and dataset-level reporting.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::data::{Location, SensorSample};
use crate::error::{config_err, input_err, Error, Result};
use crate::model::{ClassProbabilities, FusionKind, MaskSource, Model};
use crate::ops;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleConfig {
    /// Forward passes averaged per sample.
    pub size: usize,
    pub seed: u64,
}

impl EnsembleConfig {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(config_err!("ensemble size must be at least 1"));
        }
        Ok(EnsembleConfig { size, seed })
    }
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { size: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: ClassProbabilities,
    pub classes: Vec<usize>,
}

/// True when repeated forward passes can differ.
fn is_stochastic(model: &Model) -> bool {
    let cfg = model.config();
    cfg.fusion == FusionKind::Embrace && cfg.selection.as_slice().iter().filter(|&&p| p > 0.0).count() > 1
}

/// Forward passes evaluated together; bounds memory for large ensembles.
const CHUNK: usize = 32;

/// Self-ensemble predictions for `(dataset index, prepared sample)` pairs.
fn ensemble(model: &Model, samples: &[(usize, &SensorSample)], cfg: &EnsembleConfig) -> Result<Vec<Prediction>> {
    if cfg.size == 0 {
        return Err(config_err!("ensemble size must be at least 1"));
    }
    let draws = if is_stochastic(model) { cfg.size } else { 1 };
    let jobs: Vec<(usize, usize)> = (0..samples.len())
        .flat_map(|i| (0..draws).map(move |d| (i, d)))
        .collect();
    let mut sums: Vec<Option<Tensor>> = vec![None; samples.len()];
    for chunk in jobs.chunks(CHUNK) {
        let mut rngs: Vec<_> = chunk
            .iter()
            .map(|&(i, d)| substream(cfg.seed, Stream::Ensemble, &[samples[i].0 as u64, d as u64]))
            .collect();
        let inputs: Vec<&SensorSample> = chunk.iter().map(|&(i, _)| samples[i].1).collect();
        let masks = rngs.iter_mut().map(MaskSource::Sample).collect();
        let pass = model.forward_batch(&inputs, masks)?;
        for (&(i, _), probs) in chunk.iter().zip(pass.into_probs()) {
            let probs = probs.into_tensor();
            match &mut sums[i] {
                None => sums[i] = Some(probs),
                Some(s) => s.add_scaled(&probs, 1.0),
            }
        }
    }
    sums.into_iter()
        .map(|sum| {
            let mut mean = sum.expect("every sample has a draw");
            if draws > 1 {
                mean.scale(1.0 / draws as f64);
            }
            let probs = ClassProbabilities::new(mean)?;
            let classes = probs.predict();
            Ok(Prediction { probs, classes })
        })
        .collect()
}

/// Averages the softmax outputs of `cfg.size` forward passes with
/// independently drawn masks, summed in draw order. Draw `d` of sample
/// `index` uses its own substream, so a smaller ensemble is a prefix of a
/// larger one. `sample` must already be in the model's input mode.
pub fn self_ensemble_predict(
    model: &Model,
    sample: &SensorSample,
    index: usize,
    cfg: &EnsembleConfig,
) -> Result<Prediction> {
    Ok(ensemble(model, &[(index, sample)], cfg)?.remove(0))
}

/// Predicts every sample of a raw dataset; input transforms are applied here.
pub fn predict_all(model: &Model, samples: &[SensorSample], cfg: &EnsembleConfig) -> Result<Vec<Prediction>> {
    let mode = model.config().input_mode;
    let prepared = samples.iter().map(|s| mode.prepare(s)).collect::<Result<Vec<_>>>()?;
    let indexed: Vec<(usize, &SensorSample)> = prepared.iter().enumerate().collect();
    ensemble(model, &indexed, cfg)
}

/// Segment-level accuracy figures.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub overall: f64,
    /// Mean cross-entropy of the (averaged) output probabilities.
    pub loss: f64,
    pub segments: u64,
    pub per_location: BTreeMap<Location, f64>,
    /// `confusion[true][predicted]` segment counts.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    /// One metrics-log line.
    pub fn log_line(&self, step: u64, lr: f64) -> String {
        let mut line = format!("step={step} lr={lr:e} loss={:.6} acc={:.6}", self.loss, self.overall);
        for (loc, acc) in &self.per_location {
            let _ = write!(line, " acc_{loc}={acc:.6}");
        }
        line
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy {:.2}% over {} segments, loss {:.4}",
            100.0 * self.overall,
            self.segments,
            self.loss
        )?;
        for (loc, acc) in &self.per_location {
            write!(f, ", {loc} {:.2}%", 100.0 * acc)?;
        }
        Ok(())
    }
}

/// Scores predictions against the samples' per-segment labels.
pub fn score(predictions: &[Prediction], samples: &[SensorSample], classes: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(input_err!("cannot score an empty dataset"));
    }
    if predictions.len() != samples.len() {
        return Err(input_err!("{} predictions for {} samples", predictions.len(), samples.len()));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut per_location: BTreeMap<Location, (u64, u64)> = BTreeMap::new();
    let mut loss = 0.0;
    for (i, (p, s)) in predictions.iter().zip(samples).enumerate() {
        let labels = s.labels().map_err(|_| input_err!("sample {i} has no labels"))?;
        loss += ops::cross_entropy(p.probs.tensor(), labels)?;
        for (&truth, &guess) in labels.iter().zip(&p.classes) {
            confusion[truth][guess] += 1;
            if let Some(loc) = s.location {
                let e = per_location.entry(loc).or_default();
                e.0 += u64::from(truth == guess);
                e.1 += 1;
            }
        }
    }
    let segments: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(Metrics {
        overall: correct as f64 / segments as f64,
        loss: loss / samples.len() as f64,
        segments,
        per_location: per_location
            .into_iter()
            .map(|(loc, (ok, n))| (loc, ok as f64 / n as f64))
            .collect(),
        confusion,
    })
}

/// Writes one line of 1-based classes per sample to `out`, and optionally
/// the flattened probabilities to `probs_out`. Returns metrics when every
/// sample is labelled.
pub fn predict_dataset(
    model: &Model,
    samples: &[SensorSample],
    cfg: &EnsembleConfig,
    out: &Path,
    probs_out: Option<&Path>,
) -> Result<(Vec<Prediction>, Option<Metrics>)> {
    let predictions = predict_all(model, samples, cfg)?;
    let mut text = String::new();
    let mut probs_text = String::new();
    for p in &predictions {
        let labels: Vec<String> = p.classes.iter().map(|c| (c + 1).to_string()).collect();
        text.push_str(&labels.join(" "));
        text.push('\n');
        let probs: Vec<String> = p.probs.tensor().data().iter().map(|v| format!("{v:?}")).collect();
        probs_text.push_str(&probs.join(" "));
        probs_text.push('\n');
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    if let Some(path) = probs_out {
        fs::write(path, probs_text).map_err(|e| Error::io(path, e))?;
    }
    let labelled = samples.iter().all(|s| s.labels.is_some());
    let metrics = if labelled && !samples.is_empty() {
        Some(score(&predictions, samples, model.config().class_count)?)
    } else {
        None
    };
    Ok((predictions, metrics))
}

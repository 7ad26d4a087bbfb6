//! Python bindings: configs, models, datasets, training and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use embracenet::data::{load_dataset, synth_samples, write_dataset, DatasetManifest, InputMode, Location, Modality, SensorSample, SynthConfig};
use embracenet::fusion::{sample_masks, SelectionProbabilities};
use embracenet::inference::{predict_all, score, self_ensemble_predict, EnsembleConfig};
use embracenet::model::checkpoint;
use embracenet::rng::{substream, Stream};
use embracenet::train::{learning_rate, train_run, TrainConfig};
use embracenet::{Error, FusionKind, Tensor};
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        Error::Training(_) | Error::Internal(_) => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    let n = rows.len();
    Tensor::new(vec![n, cols], rows.into_iter().flatten().collect()).map_err(to_py)
}

/// Architecture description.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig(embracenet::ModelConfig);

#[pymethods]
impl PyModelConfig {
    /// A named preset: "base", "large" or "tiny".
    #[new]
    #[pyo3(signature = (preset = "base", fusion = None, input_mode = None, sensors = None))]
    fn new(preset: &str, fusion: Option<&str>, input_mode: Option<&str>, sensors: Option<Vec<String>>) -> PyResult<Self> {
        let mut cfg = embracenet::ModelConfig::preset(preset).map_err(to_py)?;
        if let Some(f) = fusion {
            cfg = cfg.with_fusion(f.parse::<FusionKind>().map_err(to_py)?);
        }
        if let Some(m) = input_mode {
            cfg = cfg.with_input_mode(m.parse::<InputMode>().map_err(to_py)?);
        }
        if let Some(list) = sensors {
            let mods = list.iter().map(|s| s.parse::<Modality>()).collect::<Result<Vec<_>, _>>().map_err(to_py)?;
            cfg = cfg.with_modalities(&mods);
        }
        Ok(PyModelConfig(cfg))
    }

    #[getter]
    fn fusion(&self) -> String {
        self.0.fusion.to_string()
    }

    #[getter]
    fn input_mode(&self) -> String {
        self.0.input_mode.to_string()
    }

    #[getter]
    fn sensors(&self) -> Vec<String> {
        self.0.modalities.iter().map(ToString::to_string).collect()
    }

    #[getter]
    fn input_length(&self) -> usize {
        self.0.input_length
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.0.class_count
    }

    /// The plain-text form stored in checkpoints.
    fn echo(&self) -> String {
        self.0.echo()
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(fusion={:?}, input_mode={:?}, sensors={})",
            self.fusion(),
            self.input_mode(),
            self.0.m()
        )
    }
}

/// A labelled or unlabelled set of sensor windows.
#[pyclass(name = "Dataset")]
struct PyDataset(Vec<SensorSample>);

#[pymethods]
impl PyDataset {
    /// Reads a dataset manifest and its data files.
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        let m = DatasetManifest::read(&manifest).map_err(to_py)?;
        Ok(PyDataset(load_dataset(&m).map_err(to_py)?))
    }

    /// Synthetic 8-class data; keep `signature_seed` fixed across splits.
    #[staticmethod]
    #[pyo3(signature = (samples = 64, noise = 0.0, seed = 0, signature_seed = 0, length = 500))]
    fn synth(samples: usize, noise: f64, seed: u64, signature_seed: u64, length: usize) -> PyResult<Self> {
        let cfg = SynthConfig {
            samples,
            noise,
            seed,
            signature_seed,
            length,
            ..Default::default()
        };
        Ok(PyDataset(synth_samples(&cfg).map_err(to_py)?))
    }

    /// Writes the dataset in the on-disk layout; returns the manifest path.
    #[pyo3(signature = (dir, split = "train", location = "Hips"))]
    fn write(&self, dir: PathBuf, split: &str, location: &str) -> PyResult<PathBuf> {
        let loc: Location = location.parse().map_err(to_py)?;
        write_dataset(&dir, split, loc, &self.0).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Sample `i` as `{sensor: rows}`.
    fn sample<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyDict>> {
        let s = self.0.get(i).ok_or_else(|| PyIndexError::new_err(format!("no sample {i}")))?;
        let d = PyDict::new(py);
        for (m, t) in &s.modalities {
            d.set_item(m.key(), rows(t))?;
        }
        Ok(d)
    }

    /// Per-second labels of sample `i`, 0-based, or None.
    fn labels(&self, i: usize) -> PyResult<Option<Vec<usize>>> {
        let s = self.0.get(i).ok_or_else(|| PyIndexError::new_err(format!("no sample {i}")))?;
        Ok(s.labels.clone())
    }

    /// Appends a sample given as `{sensor: rows}`.
    #[pyo3(signature = (sensors, labels = None))]
    fn push(&mut self, sensors: BTreeMap<String, Vec<Vec<f64>>>, labels: Option<Vec<usize>>) -> PyResult<()> {
        let mut modalities = BTreeMap::new();
        for (k, v) in sensors {
            modalities.insert(k.parse::<Modality>().map_err(to_py)?, from_rows(v)?);
        }
        self.0.push(SensorSample::new(modalities, labels));
        Ok(())
    }

    #[new]
    fn new() -> Self {
        PyDataset(Vec::new())
    }
}

/// Network parameters together with the optimizer state.
#[pyclass(name = "Model")]
struct PyModel(embracenet::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel(embracenet::Model::build(&config.0, seed).map_err(to_py)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel(checkpoint::load(&path).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig(self.0.config().clone())
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    /// `(name, [rows, cols])` for every layer output.
    fn layer_shapes(&self) -> Vec<(String, [usize; 2])> {
        self.0.network().layer_shapes().to_vec()
    }

    /// Averaged class probabilities (one row per second) of sample `index`.
    #[pyo3(signature = (dataset, index, ensemble_n = 1, seed = 0))]
    fn predict_proba(&self, dataset: &PyDataset, index: usize, ensemble_n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let raw = dataset.0.get(index).ok_or_else(|| PyIndexError::new_err(format!("no sample {index}")))?;
        let sample = self.0.config().input_mode.prepare(raw).map_err(to_py)?;
        let cfg = EnsembleConfig::new(ensemble_n, seed).map_err(to_py)?;
        let p = self_ensemble_predict(&self.0, &sample, index, &cfg).map_err(to_py)?;
        Ok(rows(p.probs.tensor()))
    }

    /// Predicted 0-based classes for every sample.
    #[pyo3(signature = (dataset, ensemble_n = 1, seed = 0))]
    fn predict(&self, dataset: &PyDataset, ensemble_n: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        let cfg = EnsembleConfig::new(ensemble_n, seed).map_err(to_py)?;
        let preds = predict_all(&self.0, &dataset.0, &cfg).map_err(to_py)?;
        Ok(preds.into_iter().map(|p| p.classes).collect())
    }

    /// Accuracy, loss and confusion matrix on a labelled dataset.
    #[pyo3(signature = (dataset, ensemble_n = 1, seed = 0))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, ensemble_n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let cfg = EnsembleConfig::new(ensemble_n, seed).map_err(to_py)?;
        let preds = predict_all(&self.0, &dataset.0, &cfg).map_err(to_py)?;
        let m = score(&preds, &dataset.0, self.0.config().class_count).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("accuracy", m.overall)?;
        d.set_item("loss", m.loss)?;
        d.set_item("segments", m.segments)?;
        d.set_item("confusion", m.confusion)?;
        Ok(d)
    }
}

/// Trains from scratch and returns `(model, losses)`; checkpoints and logs
/// go to `out_dir`.
#[pyfunction]
#[pyo3(signature = (config, train, out_dir, validation = None, total_steps = 100, batch_size = 8, lr0 = 1e-4, seed = 0, eval_interval = 50, augment = false))]
#[allow(clippy::too_many_arguments)]
fn train(
    config: &PyModelConfig,
    train: &PyDataset,
    out_dir: PathBuf,
    validation: Option<&PyDataset>,
    total_steps: u64,
    batch_size: usize,
    lr0: f64,
    seed: u64,
    eval_interval: u64,
    augment: bool,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = TrainConfig {
        total_steps,
        batch_size,
        lr0,
        seed,
        eval_interval,
        checkpoint_interval: total_steps.max(1),
        augment,
        ..Default::default()
    };
    let summary = train_run(
        &cfg,
        &config.0,
        train.0.clone(),
        validation.map(|v| v.0.as_slice()),
        &out_dir,
        None,
        &mut |_| {},
    )
    .map_err(to_py)?;
    let model = checkpoint::load(&summary.final_checkpoint).map_err(to_py)?;
    Ok((PyModel(model), summary.losses))
}

/// Learning rate at `step` under step decay.
#[pyfunction]
#[pyo3(signature = (step, lr0 = 1e-4, decay_interval = 100_000, decay_factor = 2.0))]
fn schedule(step: u64, lr0: f64, decay_interval: u64, decay_factor: f64) -> f64 {
    let cfg = TrainConfig {
        lr0,
        decay_interval,
        decay_factor,
        ..Default::default()
    };
    learning_rate(step, &cfg)
}

/// Selected modality index per coordinate of a `rows x cols` mask.
#[pyfunction]
#[pyo3(signature = (p, rows, cols, seed = 0))]
fn embrace_masks(p: Vec<f64>, rows: usize, cols: usize, seed: u64) -> PyResult<Vec<Vec<u16>>> {
    let p = SelectionProbabilities::new(p).map_err(to_py)?;
    let mut rng = substream(seed, Stream::Mask, &[]);
    let mask = sample_masks(&p, [rows, cols], &mut rng).map_err(to_py)?;
    Ok(mask.selected().chunks(cols.max(1)).map(<[u16]>::to_vec).collect())
}

/// Runs the gradient-check suite; returns `(passed, report text)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<(bool, String)> {
    let opts = embracenet::checks::SuiteOptions {
        seed,
        ..Default::default()
    };
    let reports = embracenet::checks::gradcheck_suite(&embracenet::ModelConfig::tiny(), &opts).map_err(to_py)?;
    let text: String = reports.iter().map(ToString::to_string).collect();
    Ok((reports.iter().all(|r| r.passed()), text))
}

#[pymodule]
fn embracenet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(embrace_masks, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

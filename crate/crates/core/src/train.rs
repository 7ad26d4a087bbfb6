//! Training loop: batch sampling, Adam updates, learning-rate decay,
//! checkpoints and periodic evaluation.
//!
//! Every random choice is keyed by the run seed and the step number, so a run
//! resumed from a checkpoint at step `k` continues exactly as the
//! uninterrupted run would have.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::data::{apply_random_rotation, draw_rotation, filter_invalid, SensorSample};
use crate::error::{config_err, input_err, Error, Result};
use crate::inference::{predict_all, score, EnsembleConfig, Metrics};
use crate::model::{checkpoint, MaskSource, Model, ModelConfig};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr0: f64,
    pub decay_interval: u64,
    pub decay_factor: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    /// Random rotation of each training sample on every visit.
    pub augment: bool,
    /// Ensemble size used by periodic evaluation.
    pub ensemble_n: usize,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 5000 steps with the decay interval scaled down
    /// by the same factor of 100.
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            total_steps: 5_000,
            lr0: 1e-4,
            decay_interval: 1_000,
            decay_factor: 2.0,
            seed: 0,
            eval_interval: 500,
            checkpoint_interval: 1_000,
            augment: false,
            ensemble_n: 1,
        }
    }
}

impl TrainConfig {
    /// The full 5e5-step schedule with a decay every 1e5 steps.
    pub fn full_schedule() -> Self {
        TrainConfig {
            total_steps: 500_000,
            decay_interval: 100_000,
            eval_interval: 10_000,
            checkpoint_interval: 50_000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_interval == 0 || self.eval_interval == 0 {
            return Err(config_err!("batch_size, decay_interval and eval_interval must be positive"));
        }
        if self.checkpoint_interval == 0 || self.ensemble_n == 0 {
            return Err(config_err!("checkpoint_interval and ensemble_n must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(config_err!("lr0 must be a positive number"));
        }
        if !(self.decay_factor > 1.0 && self.decay_factor.is_finite()) {
            return Err(config_err!("decay_factor must be greater than 1"));
        }
        Ok(())
    }
}

/// `lr0 / decay_factor^floor(step / decay_interval)`
pub fn learning_rate(step: u64, cfg: &TrainConfig) -> f64 {
    let decays = step / cfg.decay_interval.max(1);
    cfg.lr0 / cfg.decay_factor.powi(decays.min(i32::MAX as u64) as i32)
}

/// Indices of the samples drawn (with replacement) for `step`.
pub fn batch_indices(cfg: &TrainConfig, step: u64, dataset_len: usize) -> Vec<usize> {
    let mut rng = substream(cfg.seed, Stream::Batch, &[step]);
    (0..cfg.batch_size).map(|_| rng.random_range(0..dataset_len)).collect()
}

/// Training inputs for `step`: drawn samples, rotated when augmenting, then
/// converted to the model's input mode.
pub fn prepare_batch(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    dataset: &[SensorSample],
    step: u64,
) -> Result<(Vec<usize>, Vec<SensorSample>)> {
    let indices = batch_indices(cfg, step, dataset.len());
    let batch = indices
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let raw = if cfg.augment {
                let mut rng = substream(cfg.seed, Stream::Augment, &[step, slot as u64]);
                apply_random_rotation(&dataset[i], draw_rotation(&mut rng))?
            } else {
                dataset[i].clone()
            };
            model_cfg.input_mode.prepare(&raw)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((indices, batch))
}

/// One forward/backward/Adam cycle over a prepared batch. Returns the loss
/// averaged over the batch and the time positions. Gradients are zero on
/// return, also after an error.
pub fn train_step(model: &mut Model, batch: &[SensorSample], step: u64, cfg: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(input_err!("empty training batch"));
    }
    let lr = learning_rate(step, cfg);
    model.zero_grads();
    let mut labels = Vec::new();
    for sample in batch {
        labels.extend_from_slice(sample.labels()?);
    }
    let mut rngs: Vec<_> = (0..batch.len())
        .map(|slot| substream(cfg.seed, Stream::Mask, &[step, slot as u64]))
        .collect();
    let inputs: Vec<&SensorSample> = batch.iter().collect();
    let pass = model.forward_batch(&inputs, rngs.iter_mut().map(MaskSource::Sample).collect())?;
    let losses = model.sample_losses(&pass, &labels)?;
    if let Some(slot) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite loss {} at step {step} (lr {lr:e}) on batch slot {slot}",
            losses[slot]
        )));
    }
    model.backward(&pass, &labels, 1.0)?;
    let result = model.apply_gradients(lr);
    model.zero_grads();
    result.map_err(|e| Error::Training(format!("step {step} (lr {lr:e}): {e}")))?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn evaluate(model: &Model, dataset: &[SensorSample], ensemble: &EnsembleConfig) -> Result<Metrics> {
    let predictions = predict_all(model, dataset, ensemble)?;
    score(&predictions, dataset, model.config().class_count)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub losses: Vec<f64>,
    pub final_metrics: Option<Metrics>,
    /// Training samples dropped for holding non-finite values.
    pub dropped: usize,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

pub const LOSS_TRACE: &str = "loss_trace.txt";
pub const METRICS_LOG: &str = "metrics.log";

/// Keeps the lines of a step-keyed log whose leading `step` passes `keep`,
/// so a resumed run continues the log of the run it resumes.
fn truncate_log(path: &Path, keep: impl Fn(u64) -> bool) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            let first = l.split_whitespace().next().unwrap_or("");
            first
                .trim_start_matches("step=")
                .parse::<u64>()
                .map(&keep)
                .unwrap_or(false)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains from scratch (`resume = None`) or continues a checkpointed model.
///
/// Writes into `out_dir`: `step-XXXXXXXX.ckpt` at the start of a fresh run,
/// every `checkpoint_interval` steps and at the end; `loss_trace.txt` with
/// one `step loss` line per step; `metrics.log` with one line per
/// evaluation. Evaluation uses `validation`, or the training set when none
/// is given, every `eval_interval` steps and after the last step. Each
/// metrics line is also passed to `report`.
pub fn train_run(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: Vec<SensorSample>,
    validation: Option<&[SensorSample]>,
    out_dir: &Path,
    resume: Option<Model>,
    report: &mut dyn FnMut(&str),
) -> Result<RunSummary> {
    cfg.validate()?;
    let (train, dropped) = filter_invalid(train);
    if train.is_empty() {
        return Err(input_err!("no valid training samples"));
    }
    if let Some(i) = train.iter().position(|s| s.labels.is_none()) {
        return Err(input_err!("training sample {i} has no labels"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let trace_path = out_dir.join(LOSS_TRACE);
    let metrics_path = out_dir.join(METRICS_LOG);

    let mut model = match resume {
        Some(m) => {
            if m.config().echo() != model_cfg.echo() {
                return Err(config_err!("checkpoint model differs from the configured model"));
            }
            if m.seed() != cfg.seed {
                return Err(config_err!(
                    "checkpoint was trained with seed {}, run seed is {}",
                    m.seed(),
                    cfg.seed
                ));
            }
            m
        }
        None => Model::build(model_cfg, cfg.seed)?,
    };
    let start = model.step();
    if start > cfg.total_steps {
        return Err(config_err!(
            "checkpoint is at step {start}, beyond total_steps {}",
            cfg.total_steps
        ));
    }
    if start == 0 {
        for p in [&trace_path, &metrics_path] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
        checkpoint::save(&model, checkpoint_path(out_dir, 0))?;
    } else {
        truncate_log(&trace_path, |s| s < start)?;
        truncate_log(&metrics_path, |s| s <= start)?;
    }

    let ensemble = EnsembleConfig::new(cfg.ensemble_n, cfg.seed)?;
    let eval_set = validation.unwrap_or(&train);
    let mut losses = Vec::new();
    let mut final_metrics = None;
    let mut last_checkpoint = checkpoint_path(out_dir, start);
    for step in start..cfg.total_steps {
        let (indices, batch) = prepare_batch(cfg, model_cfg, &train, step)?;
        let loss = train_step(&mut model, &batch, step, cfg).map_err(|e| match e {
            Error::Training(msg) => Error::Training(format!("{msg} (batch samples {indices:?})")),
            other => other,
        })?;
        append(&trace_path, &format!("{step} {loss:?}"))?;
        losses.push(loss);

        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.total_steps {
            let metrics = evaluate(&model, eval_set, &ensemble)?;
            let line = metrics.log_line(done, learning_rate(step, cfg));
            append(&metrics_path, &line)?;
            report(&line);
            final_metrics = Some(metrics);
        }
        if done % cfg.checkpoint_interval == 0 || done == cfg.total_steps {
            last_checkpoint = checkpoint_path(out_dir, done);
            checkpoint::save(&model, &last_checkpoint)?;
        }
    }
    Ok(RunSummary {
        final_checkpoint: last_checkpoint,
        steps: model.step(),
        losses,
        final_metrics,
        dropped,
    })
}

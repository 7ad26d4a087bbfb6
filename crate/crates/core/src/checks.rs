//! Gradient-check suite over every layer type and whole tiny models.

use rand::Rng as _;

use crate::data::{synth_samples, InputMode, SensorSample, SynthConfig};
use crate::error::{config_err, Result};
use crate::fusion;
use crate::gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
use crate::model::{FusionKind, MaskSource, ModelConfig, Network};
use crate::ops;
use crate::params::ParameterStore;
use crate::rng::{substream, Rng, Stream};
use crate::tensor::Tensor;

/// Suite settings. `corrupt_backward` perturbs one analytic gradient so that
/// the harness can confirm failures are detected.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub check: GradCheckOptions,
    pub seed: u64,
    pub corrupt_backward: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            check: GradCheckOptions::default(),
            seed: 0,
            corrupt_backward: false,
        }
    }
}

fn random(rng: &mut Rng, shape: &[usize], low: f64, high: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(low..high)).collect()).expect("shape")
}

/// Values bounded away from zero so that ReLU kinks stay outside the
/// finite-difference stencil.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn weighted_sum(y: &Tensor, coef: &Tensor) -> f64 {
    y.data().iter().zip(coef.data()).map(|(a, b)| a * b).sum()
}

fn corrupt(store: &mut ParameterStore, enabled: bool) {
    if enabled {
        if let Some(p) = store.iter_mut().next() {
            p.grad.data_mut()[0] += 1e-2;
        }
    }
}

fn conv_check(opts: &SuiteOptions, stride: usize) -> Result<GradCheckReport> {
    let mut rng = substream(opts.seed, Stream::Test, &[1, stride as u64]);
    let mut store = ParameterStore::new();
    let x = store.insert("x", random(&mut rng, &[13, 3], -1.0, 1.0))?;
    let w = store.insert("w", random(&mut rng, &[5, 3, 4], -1.0, 1.0))?;
    let b = store.insert("b", random(&mut rng, &[4], -1.0, 1.0))?;
    let out_len = ops::same_output_len(13, stride);
    let coef = random(&mut rng, &[out_len, 4], -1.0, 1.0);
    gradient_check(
        &format!("conv1d stride {stride}"),
        &mut store,
        |s| Ok(weighted_sum(&ops::conv1d_forward(s.value(x), s.value(w), s.value(b), stride)?, &coef)),
        |s| {
            let g = ops::conv1d_backward(&coef, s.value(x), s.value(w), stride, true)?;
            s.accumulate(x, &g.input.expect("requested"), 1.0)?;
            s.accumulate(w, &g.weights, 1.0)?;
            s.accumulate(b, &g.bias, 1.0)?;
            corrupt(s, opts.corrupt_backward);
            Ok(())
        },
        &opts.check,
    )
}

fn dense_check(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut rng = substream(opts.seed, Stream::Test, &[2]);
    let mut store = ParameterStore::new();
    let x = store.insert("x", random(&mut rng, &[5, 6], -1.0, 1.0))?;
    let w = store.insert("w", random(&mut rng, &[6, 4], -1.0, 1.0))?;
    let b = store.insert("b", random(&mut rng, &[4], -1.0, 1.0))?;
    let coef = random(&mut rng, &[5, 4], -1.0, 1.0);
    gradient_check(
        "dense",
        &mut store,
        |s| Ok(weighted_sum(&ops::dense_forward(s.value(x), s.value(w), s.value(b))?, &coef)),
        |s| {
            let g = ops::dense_backward(&coef, s.value(x), s.value(w), true)?;
            s.accumulate(x, &g.input.expect("requested"), 1.0)?;
            s.accumulate(w, &g.weights, 1.0)?;
            s.accumulate(b, &g.bias, 1.0)
        },
        &opts.check,
    )
}

fn relu_check(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut rng = substream(opts.seed, Stream::Test, &[3]);
    let mut store = ParameterStore::new();
    let x = store.insert("x", away_from_zero(&mut rng, &[5, 6]))?;
    let coef = random(&mut rng, &[5, 6], -1.0, 1.0);
    gradient_check(
        "relu",
        &mut store,
        |s| Ok(weighted_sum(&ops::relu(s.value(x)), &coef)),
        |s| {
            let g = ops::relu_backward(&coef, s.value(x));
            s.accumulate(x, &g, 1.0)
        },
        &opts.check,
    )
}

fn softmax_ce_check(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut rng = substream(opts.seed, Stream::Test, &[4]);
    let mut store = ParameterStore::new();
    let z = store.insert("logits", random(&mut rng, &[5, 8], -2.0, 2.0))?;
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..8)).collect();
    gradient_check(
        "softmax + cross-entropy",
        &mut store,
        |s| ops::cross_entropy(&ops::softmax_rows(s.value(z)), &labels),
        |s| {
            let g = ops::softmax_cross_entropy_backward(&ops::softmax_rows(s.value(z)), &labels)?;
            s.accumulate(z, &g, 1.0)
        },
        &opts.check,
    )
}

fn embrace_check(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut rng = substream(opts.seed, Stream::Test, &[5]);
    let m = 3;
    let mut store = ParameterStore::new();
    let ids = (0..m)
        .map(|k| store.insert(format!("d{k}"), random(&mut rng, &[5, 4], -1.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let mask = fusion::sample_masks(&fusion::SelectionProbabilities::uniform(m), [5, 4], &mut rng)?;
    let coef = random(&mut rng, &[5, 4], -1.0, 1.0);
    let docked = |s: &ParameterStore| ids.iter().map(|&id| s.value(id).clone()).collect::<Vec<_>>();
    gradient_check(
        "embrace layer (frozen masks)",
        &mut store,
        |s| Ok(weighted_sum(&fusion::embrace_forward(&docked(s), &mask)?, &coef)),
        |s| {
            for (id, g) in ids.iter().zip(fusion::embrace_backward(&coef, &mask)?) {
                s.accumulate(*id, &g, 1.0)?;
            }
            Ok(())
        },
        &opts.check,
    )
}

fn tiny_samples(config: &ModelConfig, seed: u64, count: usize) -> Result<Vec<SensorSample>> {
    let segments = 5;
    let synth = SynthConfig {
        samples: count,
        noise: 0.1,
        seed,
        length: config.input_length,
        segments,
        ..Default::default()
    };
    synth_samples(&synth)?
        .into_iter()
        .enumerate()
        .map(|(i, mut sample)| {
            // Mixed labels exercise more of the output gradient.
            sample.labels = Some((0..segments).map(|t| (t * 3 + i + seed as usize) % config.class_count).collect());
            config.input_mode.prepare(&sample)
        })
        .collect()
}

/// Loss and gradients of a two-sample batch. Masks are frozen by replaying
/// the same mask substreams on every evaluation. Zero biases put dead units
/// exactly on the ReLU kink, so biases are randomized; when a unit still
/// lands within a step of its kink the biases are drawn again.
fn model_check(config: &ModelConfig, opts: &SuiteOptions) -> Result<GradCheckReport> {
    const ATTEMPTS: u64 = 4;
    let mut attempt = 0;
    loop {
        let report = model_check_once(config, opts, attempt)?;
        attempt += 1;
        if report.kinks() == 0 || attempt == ATTEMPTS {
            return Ok(report);
        }
    }
}

fn model_check_once(config: &ModelConfig, opts: &SuiteOptions, attempt: u64) -> Result<GradCheckReport> {
    let mut store = ParameterStore::new();
    let network = Network::build(config, &mut store, opts.seed)?;
    let mut rng = substream(opts.seed, Stream::Test, &[6, attempt]);
    for p in store.iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.value = random(&mut rng, p.value.shape(), 0.05, 0.2);
    }
    let samples = tiny_samples(config, opts.seed, 2)?;
    let inputs: Vec<&SensorSample> = samples.iter().collect();
    let mut labels = Vec::new();
    for s in &samples {
        labels.extend_from_slice(s.labels()?);
    }
    if labels.len() != samples.len() * network.segments() {
        return Err(config_err!(
            "gradient check model makes {} decisions per window; use a config with 5",
            network.segments()
        ));
    }
    let mask_rngs = || -> Vec<Rng> { (0..2).map(|i| substream(opts.seed, Stream::Mask, &[i])).collect() };
    let forward = |s: &ParameterStore| {
        let mut rngs = mask_rngs();
        network.forward_batch(s, &inputs, rngs.iter_mut().map(MaskSource::Sample).collect())
    };
    let label = match config.fusion {
        FusionKind::Embrace => "model embrace (frozen masks)".to_string(),
        other => format!("model {other}"),
    };
    gradient_check(
        &label,
        &mut store,
        |s| network.loss(&forward(s)?, &labels),
        |s| {
            let pass = forward(s)?;
            network.backward(s, &pass, &labels, 1.0)?;
            corrupt(s, opts.corrupt_backward);
            Ok(())
        },
        &opts.check,
    )
}

/// Runs every layer check and a full-model check for each fusion method on
/// `config` (normally [`ModelConfig::tiny`]).
pub fn gradcheck_suite(config: &ModelConfig, opts: &SuiteOptions) -> Result<Vec<GradCheckReport>> {
    let mut reports = vec![
        conv_check(opts, 1)?,
        conv_check(opts, 2)?,
        dense_check(opts)?,
        relu_check(opts)?,
        softmax_ce_check(opts)?,
        embrace_check(opts)?,
    ];
    for fusion in [FusionKind::Embrace, FusionKind::Early, FusionKind::Intermediate, FusionKind::Late] {
        reports.push(model_check(&config.clone().with_fusion(fusion), opts)?);
    }
    if config.input_mode == InputMode::Raw {
        let fft = config.clone().with_input_mode(InputMode::RawAndFft);
        let mut r = model_check(&fft, opts)?;
        r.label.push_str(", raw and fft input");
        reports.push(r);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_suite_passes_and_corruption_is_caught() {
        let reports = gradcheck_suite(&ModelConfig::tiny(), &SuiteOptions::default()).unwrap();
        for r in &reports {
            assert!(r.passed(), "{r}");
        }
        let bad = SuiteOptions {
            corrupt_backward: true,
            ..Default::default()
        };
        let reports = gradcheck_suite(&ModelConfig::tiny(), &bad).unwrap();
        assert!(reports.iter().any(|r| !r.passed()));
    }
}

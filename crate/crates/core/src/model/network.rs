//! Network assembly and the fixed-sequence forward/backward tape.

use rand::Rng as _;

use crate::adam::{adam_step, OptimizerState};
use crate::data::{Modality, SensorSample};
use crate::error::{config_err, input_err, internal_err, Result};
use crate::fusion::{self, FusionMask, SelectionProbabilities};
use crate::model::config::{FusionKind, LayerSpec, ModelConfig};
use crate::ops;
use crate::params::{ParamId, ParameterStore};
use crate::rng::{substream, Rng, Stream};
use crate::tensor::Tensor;

/// Row-stochastic `[segments x classes]` output.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(Tensor);

impl ClassProbabilities {
    /// Wraps `probs`, checking that rows are non-negative and sum to one.
    pub fn new(probs: Tensor) -> Result<Self> {
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(input_err!("row {r} is not a probability distribution: {row:?}"));
            }
        }
        Ok(ClassProbabilities(probs))
    }

    pub(crate) fn from_softmax(probs: Tensor) -> Self {
        ClassProbabilities(probs)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn predict(&self) -> Vec<usize> {
        predict(&self.0)
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
struct ConvRef {
    weights: ParamId,
    bias: ParamId,
    stride: usize,
    relu: bool,
}

#[derive(Debug, Clone)]
struct Stack {
    layers: Vec<ConvRef>,
}

/// Input followed by every layer's (post-activation) output.
#[derive(Debug, Clone)]
struct StackCache {
    activations: Vec<Tensor>,
}

impl StackCache {
    fn output(&self) -> &Tensor {
        self.activations.last().expect("stack cache holds the input")
    }
}

impl Stack {
    fn forward(&self, store: &ParameterStore, input: Tensor, batch: usize) -> Result<StackCache> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input);
        for layer in &self.layers {
            let x = activations.last().expect("non-empty");
            let mut y =
                ops::conv1d_forward_batch(x, batch, store.value(layer.weights), store.value(layer.bias), layer.stride)?;
            if layer.relu {
                y = ops::relu(&y);
            }
            activations.push(y);
        }
        Ok(StackCache { activations })
    }

    fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &StackCache,
        grad_out: Tensor,
        batch: usize,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(internal_err!("stack cache does not match the network"));
        }
        let mut grad = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                grad = ops::relu_backward(&grad, &cache.activations[i + 1]);
            }
            let g = ops::conv1d_backward_batch(
                &grad,
                &cache.activations[i],
                batch,
                store.value(layer.weights),
                layer.stride,
                need_input_grad || i > 0,
            )?;
            store.accumulate(layer.weights, &g.weights, 1.0)?;
            store.accumulate(layer.bias, &g.bias, 1.0)?;
            match g.input {
                Some(gi) => grad = gi,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }
}

#[derive(Debug, Clone)]
struct DenseRef {
    weights: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum Topology {
    Embrace {
        encoders: Vec<Stack>,
        docks: Vec<DenseRef>,
        head: Stack,
    },
    Early {
        encoder: Stack,
        head: Stack,
    },
    Intermediate {
        encoders: Vec<Stack>,
        head: Stack,
    },
    Late {
        branches: Vec<(Stack, Stack)>,
    },
}

/// How the embrace layer combines docked features on a forward pass.
pub enum MaskSource<'a> {
    /// Draw fresh masks from the generator.
    Sample(&'a mut Rng),
    /// Reuse given masks (gradient checks, replay).
    Fixed(&'a FusionMask),
    /// Use `sum_k p_k d_k` instead of a random selection.
    Expected,
}

#[derive(Debug, Clone)]
enum FusionState {
    Mask(FusionMask),
    Expected,
}

#[derive(Debug, Clone)]
enum CacheKind {
    Embrace {
        encoders: Vec<StackCache>,
        docked: Vec<Tensor>,
        fusion: FusionState,
        head: StackCache,
    },
    Early {
        encoder: StackCache,
        head: StackCache,
    },
    Intermediate {
        encoders: Vec<StackCache>,
        head: StackCache,
    },
    Late {
        branches: Vec<(StackCache, StackCache, Tensor)>,
    },
}

/// Output of a forward pass over one or more samples, plus what the
/// backward pass needs. Per-sample tensors are stacked row-wise.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    probs: Vec<ClassProbabilities>,
    version: u64,
    cache: CacheKind,
}

impl ForwardPass {
    /// Output of the first (for single-sample passes, the only) sample.
    pub fn probs(&self) -> &ClassProbabilities {
        &self.probs[0]
    }

    /// Outputs of every sample, in batch order.
    pub fn batch_probs(&self) -> &[ClassProbabilities] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<ClassProbabilities> {
        self.probs
    }

    pub fn batch_size(&self) -> usize {
        self.probs.len()
    }

    /// Masks drawn by the embrace layer, if any; batch samples are stacked.
    pub fn mask(&self) -> Option<&FusionMask> {
        match &self.cache {
            CacheKind::Embrace {
                fusion: FusionState::Mask(m),
                ..
            } => Some(m),
            _ => None,
        }
    }

    /// Docked features `d_k` of an embrace pass.
    pub fn docked(&self) -> Option<&[Tensor]> {
        match &self.cache {
            CacheKind::Embrace { docked, .. } => Some(docked),
            _ => None,
        }
    }
}

/// Immutable layer graph: which parameters feed which layer.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    topology: Topology,
    segments: usize,
    layer_shapes: Vec<(String, [usize; 2])>,
}

struct Builder<'a> {
    store: &'a mut ParameterStore,
    shapes: Vec<(String, [usize; 2])>,
    rng: Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], limit: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-limit..=limit)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn check(&mut self, name: String, shape: [usize; 2], expected: Option<[usize; 2]>) -> Result<()> {
        if let Some(e) = expected {
            if e != shape {
                return Err(config_err!("{name}: produces {shape:?}, expected {e:?}"));
            }
        }
        self.shapes.push((name, shape));
        Ok(())
    }

    /// Adds a conv stack; returns it with its output shape.
    fn stack(
        &mut self,
        prefix: &str,
        specs: &[LayerSpec],
        input: [usize; 2],
        last_is_classifier: bool,
    ) -> Result<(Stack, [usize; 2])> {
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{prefix}.conv{}", i + 1);
            if spec.filters == 0 || spec.kernel == 0 || spec.stride == 0 {
                return Err(config_err!("{name}: filters, kernel and stride must be positive"));
            }
            let classifier = last_is_classifier && i + 1 == specs.len();
            let fan_in = (spec.kernel * shape[1]) as f64;
            // ReLU layers get He scaling; the linear classifier unit variance.
            let limit = if classifier { (3.0 / fan_in).sqrt() } else { (6.0 / fan_in).sqrt() };
            let weights = self.uniform(&format!("{name}.w"), &[spec.kernel, shape[1], spec.filters], limit)?;
            let bias = self.store.insert(format!("{name}.b"), Tensor::zeros(&[spec.filters]))?;
            shape = [ops::same_output_len(shape[0], spec.stride), spec.filters];
            self.check(name, shape, spec.expected)?;
            layers.push(ConvRef {
                weights,
                bias,
                stride: spec.stride,
                relu: !classifier,
            });
        }
        Ok((Stack { layers }, shape))
    }
}

impl Network {
    /// Lays out parameters in `store` (which must be empty) and checks shape
    /// propagation against every expectation in the config.
    pub fn build(config: &ModelConfig, store: &mut ParameterStore, seed: u64) -> Result<Network> {
        validate(config)?;
        let mut b = Builder {
            store,
            shapes: Vec::new(),
            rng: substream(seed, Stream::Init, &[]),
        };
        let len = config.input_length;
        let encoder_input = |m: Modality| [len, config.input_channels(m)];
        let (topology, head_out) = match config.fusion {
            FusionKind::Embrace => {
                let mut encoders = Vec::new();
                let mut enc_out = [0, 0];
                for &m in &config.modalities {
                    let (s, out) = b.stack(&format!("enc.{m}"), &config.preproc, encoder_input(m), false)?;
                    encoders.push(s);
                    enc_out = out;
                }
                let c = config.docking_width;
                let mut docks = Vec::new();
                for &m in &config.modalities {
                    let name = format!("dock.{m}");
                    let weights = b.uniform(&format!("{name}.w"), &[enc_out[1], c], (6.0 / enc_out[1] as f64).sqrt())?;
                    let bias = b.store.insert(format!("{name}.b"), Tensor::zeros(&[c]))?;
                    b.check(name, [enc_out[0], c], config.docking_expected)?;
                    docks.push(DenseRef { weights, bias });
                }
                b.check("embrace".to_string(), [enc_out[0], c], config.docking_expected)?;
                let (head, out) = b.stack("post", &config.postproc, [enc_out[0], c], true)?;
                (Topology::Embrace { encoders, docks, head }, out)
            }
            FusionKind::Early => {
                let channels = config.modalities.iter().map(|&m| config.input_channels(m)).sum();
                let (encoder, enc_out) = b.stack("enc.early", &config.preproc, [len, channels], false)?;
                let (head, out) = b.stack("post", &config.postproc, enc_out, true)?;
                (Topology::Early { encoder, head }, out)
            }
            FusionKind::Intermediate => {
                let mut encoders = Vec::new();
                let mut enc_out = [0, 0];
                for &m in &config.modalities {
                    let (s, out) = b.stack(&format!("enc.{m}"), &config.preproc, encoder_input(m), false)?;
                    encoders.push(s);
                    enc_out = out;
                }
                let fused = [enc_out[0], enc_out[1] * config.m()];
                let (head, out) = b.stack("post", &config.postproc, fused, true)?;
                (Topology::Intermediate { encoders, head }, out)
            }
            FusionKind::Late => {
                let mut branches = Vec::new();
                let mut out = [0, 0];
                for &m in &config.modalities {
                    let (enc, enc_out) = b.stack(&format!("late.{m}.enc"), &config.preproc, encoder_input(m), false)?;
                    let (head, o) = b.stack(&format!("late.{m}.post"), &config.postproc, enc_out, true)?;
                    branches.push((enc, head));
                    out = o;
                }
                (Topology::Late { branches }, out)
            }
        };
        if head_out[1] != config.class_count {
            return Err(config_err!(
                "classifier produces {} classes, config has {}",
                head_out[1],
                config.class_count
            ));
        }
        Ok(Network {
            config: config.clone(),
            topology,
            segments: head_out[0],
            layer_shapes: b.shapes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Decisions per sample (rows of the output).
    pub fn segments(&self) -> usize {
        self.segments
    }

    /// Output shape of every layer, in build order.
    pub fn layer_shapes(&self) -> &[(String, [usize; 2])] {
        &self.layer_shapes
    }

    /// Row-stacked inputs of one sensor across the batch.
    fn input(&self, samples: &[&SensorSample], m: Modality) -> Result<Tensor> {
        let expected = [self.config.input_length, self.config.input_channels(m)];
        let mut parts = Vec::with_capacity(samples.len());
        for s in samples {
            let x = s.get(m)?;
            if x.shape() != expected {
                return Err(input_err!(
                    "{m} input is {:?}, the model expects {expected:?} ({} input)",
                    x.shape(),
                    self.config.input_mode
                ));
            }
            parts.push(x);
        }
        Tensor::concat_rows(&parts)
    }

    fn fuse(&self, docked: &[Tensor], masks: Vec<MaskSource<'_>>) -> Result<(Tensor, FusionState)> {
        let shape = [self.segments, self.config.docking_width];
        let expected = masks.iter().filter(|m| matches!(m, MaskSource::Expected)).count();
        if expected == masks.len() {
            return Ok((
                fusion::expected_fusion(docked, &self.config.selection)?,
                FusionState::Expected,
            ));
        }
        if expected > 0 {
            return Err(input_err!("expected fusion cannot be mixed with masks in one batch"));
        }
        let per_sample = masks
            .into_iter()
            .map(|source| match source {
                MaskSource::Sample(rng) => fusion::sample_masks(&self.config.selection, shape, rng),
                MaskSource::Fixed(mask) if mask.shape() == shape => Ok(mask.clone()),
                MaskSource::Fixed(mask) => Err(input_err!("mask {:?} does not fit features {shape:?}", mask.shape())),
                MaskSource::Expected => unreachable!("handled above"),
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = FusionMask::concat_rows(&per_sample)?;
        Ok((fusion::embrace_forward(docked, &mask)?, FusionState::Mask(mask)))
    }

    /// Forward pass of one sample with parameters from `store`, which must be
    /// laid out by [`Network::build`].
    pub fn forward(&self, store: &ParameterStore, sample: &SensorSample, masks: MaskSource<'_>) -> Result<ForwardPass> {
        self.forward_batch(store, &[sample], vec![masks])
    }

    /// Forward pass of a batch; `masks` holds one source per sample and is
    /// ignored by the baseline fusions.
    pub fn forward_batch(
        &self,
        store: &ParameterStore,
        samples: &[&SensorSample],
        masks: Vec<MaskSource<'_>>,
    ) -> Result<ForwardPass> {
        self.forward_versioned(store, samples, masks, 0)
    }

    fn forward_versioned(
        &self,
        store: &ParameterStore,
        samples: &[&SensorSample],
        masks: Vec<MaskSource<'_>>,
        version: u64,
    ) -> Result<ForwardPass> {
        let batch = samples.len();
        if batch == 0 {
            return Err(input_err!("empty batch"));
        }
        if masks.len() != batch {
            return Err(input_err!("{} mask sources for {batch} samples", masks.len()));
        }
        let mods = &self.config.modalities;
        let (probs, cache) = match &self.topology {
            Topology::Embrace { encoders, docks, head } => {
                let mut enc_caches = Vec::with_capacity(encoders.len());
                let mut docked = Vec::with_capacity(encoders.len());
                for ((enc, dock), &m) in encoders.iter().zip(docks).zip(mods) {
                    let c = enc.forward(store, self.input(samples, m)?, batch)?;
                    let d = ops::dense_forward(c.output(), store.value(dock.weights), store.value(dock.bias))?;
                    docked.push(ops::relu(&d));
                    enc_caches.push(c);
                }
                let (fused, fusion) = self.fuse(&docked, masks)?;
                let head_cache = head.forward(store, fused, batch)?;
                let probs = ops::softmax_rows(head_cache.output());
                (
                    probs,
                    CacheKind::Embrace {
                        encoders: enc_caches,
                        docked,
                        fusion,
                        head: head_cache,
                    },
                )
            }
            Topology::Early { encoder, head } => {
                let parts = mods.iter().map(|&m| self.input(samples, m)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor> = parts.iter().collect();
                let x = Tensor::concat_cols(&refs)?;
                let enc = encoder.forward(store, x, batch)?;
                let head_cache = head.forward(store, enc.output().clone(), batch)?;
                let probs = ops::softmax_rows(head_cache.output());
                (probs, CacheKind::Early { encoder: enc, head: head_cache })
            }
            Topology::Intermediate { encoders, head } => {
                let enc_caches = encoders
                    .iter()
                    .zip(mods)
                    .map(|(enc, &m)| enc.forward(store, self.input(samples, m)?, batch))
                    .collect::<Result<Vec<_>>>()?;
                let features: Vec<Tensor> = enc_caches.iter().map(|c| c.output().clone()).collect();
                let head_cache = head.forward(store, fusion::intermediate_fuse(&features)?, batch)?;
                let probs = ops::softmax_rows(head_cache.output());
                (
                    probs,
                    CacheKind::Intermediate {
                        encoders: enc_caches,
                        head: head_cache,
                    },
                )
            }
            Topology::Late { branches } => {
                let mut caches = Vec::with_capacity(branches.len());
                for ((enc, head), &m) in branches.iter().zip(mods) {
                    let e = enc.forward(store, self.input(samples, m)?, batch)?;
                    let h = head.forward(store, e.output().clone(), batch)?;
                    let p = ops::softmax_rows(h.output());
                    caches.push((e, h, p));
                }
                let per_model: Vec<Tensor> = caches.iter().map(|c| c.2.clone()).collect();
                (fusion::late_fuse(&per_model)?, CacheKind::Late { branches: caches })
            }
        };
        let probs = probs
            .split_rows(batch)?
            .into_iter()
            .map(ClassProbabilities::from_softmax)
            .collect();
        Ok(ForwardPass { probs, version, cache })
    }

    fn check_labels(&self, pass: &ForwardPass, labels: &[usize]) -> Result<()> {
        let rows = self.segments * pass.batch_size();
        if labels.len() != rows {
            return Err(input_err!("{} labels for {rows} segment decisions", labels.len()));
        }
        Ok(())
    }

    /// Per-sample training loss: cross-entropy of the output averaged over
    /// segments, or for late fusion the mean of the per-sensor models'
    /// cross-entropies. `labels` concatenates the samples' segment labels.
    pub fn sample_losses(&self, pass: &ForwardPass, labels: &[usize]) -> Result<Vec<f64>> {
        self.check_labels(pass, labels)?;
        let t = self.segments;
        let per_sample = |probs: &Tensor| -> Result<Vec<f64>> {
            probs
                .split_rows(pass.batch_size())?
                .iter()
                .zip(labels.chunks(t))
                .map(|(p, l)| ops::cross_entropy(p, l))
                .collect()
        };
        match &pass.cache {
            CacheKind::Late { branches } => {
                let mut total = vec![0.0; pass.batch_size()];
                for (_, _, p) in branches {
                    for (acc, l) in total.iter_mut().zip(per_sample(p)?) {
                        *acc += l;
                    }
                }
                Ok(total.into_iter().map(|l| l / branches.len() as f64).collect())
            }
            _ => pass
                .probs
                .iter()
                .zip(labels.chunks(t))
                .map(|(p, l)| ops::cross_entropy(p.tensor(), l))
                .collect(),
        }
    }

    /// Mean of [`Network::sample_losses`] over the batch.
    pub fn loss(&self, pass: &ForwardPass, labels: &[usize]) -> Result<f64> {
        let losses = self.sample_losses(pass, labels)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Accumulates `scale * d loss / d params` into the store's gradients,
    /// where `loss` is the batch mean of [`Network::loss`].
    pub fn backward(&self, store: &mut ParameterStore, pass: &ForwardPass, labels: &[usize], scale: f64) -> Result<()> {
        self.check_labels(pass, labels)?;
        let batch = pass.batch_size();
        let logit_grad = |probs: &Tensor, scale: f64| -> Result<Tensor> {
            let mut g = ops::softmax_cross_entropy_backward(probs, labels)?;
            g.scale(scale);
            Ok(g)
        };
        let stacked = || -> Result<Tensor> {
            let parts: Vec<&Tensor> = pass.probs.iter().map(ClassProbabilities::tensor).collect();
            Tensor::concat_rows(&parts)
        };
        match (&self.topology, &pass.cache) {
            (
                Topology::Embrace { encoders, docks, head },
                CacheKind::Embrace {
                    encoders: enc_caches,
                    docked,
                    fusion,
                    head: head_cache,
                },
            ) => {
                let g = logit_grad(&stacked()?, scale)?;
                let g_fused = head
                    .backward(store, head_cache, g, batch, true)?
                    .ok_or_else(|| internal_err!("head returned no input gradient"))?;
                let g_docked = match fusion {
                    FusionState::Mask(mask) => fusion::embrace_backward(&g_fused, mask)?,
                    FusionState::Expected => self
                        .config
                        .selection
                        .as_slice()
                        .iter()
                        .map(|&p| {
                            let mut g = g_fused.clone();
                            g.scale(p);
                            g
                        })
                        .collect(),
                };
                for (((enc, dock), (cache, d)), gd) in encoders
                    .iter()
                    .zip(docks)
                    .zip(enc_caches.iter().zip(docked))
                    .zip(g_docked)
                {
                    let gd = ops::relu_backward(&gd, d);
                    let dg = ops::dense_backward(&gd, cache.output(), store.value(dock.weights), true)?;
                    store.accumulate(dock.weights, &dg.weights, 1.0)?;
                    store.accumulate(dock.bias, &dg.bias, 1.0)?;
                    let gh = dg.input.ok_or_else(|| internal_err!("dense returned no input gradient"))?;
                    enc.backward(store, cache, gh, batch, false)?;
                }
            }
            (Topology::Early { encoder, head }, CacheKind::Early { encoder: ec, head: hc }) => {
                let g = logit_grad(&stacked()?, scale)?;
                let gh = head
                    .backward(store, hc, g, batch, true)?
                    .ok_or_else(|| internal_err!("head returned no input gradient"))?;
                encoder.backward(store, ec, gh, batch, false)?;
            }
            (
                Topology::Intermediate { encoders, head },
                CacheKind::Intermediate {
                    encoders: enc_caches,
                    head: hc,
                },
            ) => {
                let g = logit_grad(&stacked()?, scale)?;
                let g_fused = head
                    .backward(store, hc, g, batch, true)?
                    .ok_or_else(|| internal_err!("head returned no input gradient"))?;
                let widths: Vec<usize> = enc_caches.iter().map(|c| c.output().cols()).collect();
                for ((enc, cache), gh) in encoders
                    .iter()
                    .zip(enc_caches)
                    .zip(fusion::intermediate_backward(&g_fused, &widths)?)
                {
                    enc.backward(store, cache, gh, batch, false)?;
                }
            }
            (Topology::Late { branches }, CacheKind::Late { branches: caches }) => {
                let per_branch = scale / branches.len() as f64;
                for ((enc, head), (ec, hc, p)) in branches.iter().zip(caches) {
                    let g = logit_grad(p, per_branch)?;
                    let gh = head
                        .backward(store, hc, g, batch, true)?
                        .ok_or_else(|| internal_err!("head returned no input gradient"))?;
                    enc.backward(store, ec, gh, batch, false)?;
                }
            }
            _ => return Err(internal_err!("forward cache belongs to a different network")),
        }
        Ok(())
    }
}

fn validate(config: &ModelConfig) -> Result<()> {
    if config.modalities.is_empty() {
        return Err(config_err!("at least one sensor is required"));
    }
    let mut seen = config.modalities.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != config.modalities.len() {
        return Err(config_err!("sensors listed twice: {:?}", config.modalities));
    }
    if config.input_length == 0 || config.docking_width == 0 || config.class_count == 0 {
        return Err(config_err!("input length, docking width and class count must be positive"));
    }
    if config.preproc.is_empty() {
        return Err(config_err!("the encoder needs at least one layer"));
    }
    let last = config
        .postproc
        .last()
        .ok_or_else(|| config_err!("the head needs at least a classifier layer"))?;
    let idx = config.postproc.len();
    if last.kernel != 1 || last.filters != config.class_count {
        return Err(config_err!(
            "post.conv{idx}: classifier must have kernel 1 and {} filters, got {last}",
            config.class_count
        ));
    }
    if config.selection.len() != config.m() {
        return Err(config_err!(
            "{} selection probabilities for {} sensors",
            config.selection.len(),
            config.m()
        ));
    }
    SelectionProbabilities::new(config.selection.as_slice().to_vec())?;
    Ok(())
}

/// A network with its parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct Model {
    network: Network,
    store: ParameterStore,
    optimizer: OptimizerState,
    seed: u64,
    /// Bumped on every parameter change; forward passes remember it.
    version: u64,
}

impl Model {
    /// Builds and initializes a model deterministically from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        let mut store = ParameterStore::new();
        let network = Network::build(config, &mut store, seed)?;
        Ok(Model {
            network,
            store,
            optimizer: OptimizerState::default(),
            seed,
            version: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    /// Mutable parameters; invalidates outstanding forward passes.
    pub fn store_mut(&mut self) -> &mut ParameterStore {
        self.version += 1;
        &mut self.store
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub(crate) fn set_optimizer(&mut self, state: OptimizerState) {
        self.optimizer = state;
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.optimizer.step_count
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn forward(&self, sample: &SensorSample, rng: &mut Rng) -> Result<ForwardPass> {
        self.forward_with(sample, MaskSource::Sample(rng))
    }

    pub fn forward_with(&self, sample: &SensorSample, masks: MaskSource<'_>) -> Result<ForwardPass> {
        self.forward_batch(&[sample], vec![masks])
    }

    pub fn forward_batch(&self, samples: &[&SensorSample], masks: Vec<MaskSource<'_>>) -> Result<ForwardPass> {
        self.network.forward_versioned(&self.store, samples, masks, self.version)
    }

    pub fn loss(&self, pass: &ForwardPass, labels: &[usize]) -> Result<f64> {
        self.network.loss(pass, labels)
    }

    pub fn sample_losses(&self, pass: &ForwardPass, labels: &[usize]) -> Result<Vec<f64>> {
        self.network.sample_losses(pass, labels)
    }

    /// Accumulates gradients of `scale * loss`; fails on a pass computed
    /// before the last parameter change.
    pub fn backward(&mut self, pass: &ForwardPass, labels: &[usize], scale: f64) -> Result<()> {
        if pass.version != self.version {
            return Err(internal_err!(
                "stale forward cache (version {}, model at {})",
                pass.version,
                self.version
            ));
        }
        self.network.backward(&mut self.store, pass, labels, scale)
    }

    pub fn zero_grads(&mut self) {
        self.store.zero_grads();
    }

    /// Applies one Adam update from the accumulated gradients.
    pub fn apply_gradients(&mut self, lr: f64) -> Result<()> {
        adam_step(&mut self.store, &mut self.optimizer, lr)?;
        self.version += 1;
        Ok(())
    }
}

/// Entropy of a uniform prediction over `classes`, the expected loss of an
/// untrained model.
pub fn uniform_loss(classes: usize) -> f64 {
    (classes as f64).ln()
}

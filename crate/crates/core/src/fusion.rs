//! Stochastic per-coordinate modality selection and the baseline fusions.
//!
//! For every coordinate `(i, j)` of the docked feature maps one modality is
//! drawn from a categorical distribution `p`; the fused map copies that
//! modality's value. Writing the draw as binary masks `r_k` with exactly
//! one set bit per coordinate, the fused map is `e = sum_k r_k * d_k`.

use rand::Rng as _;

use crate::data::{Modality, SensorSample};
use crate::error::{config_err, input_err, internal_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Tolerance on `sum(p) == 1`.
const PROB_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProbabilities(Vec<f64>);

impl SelectionProbabilities {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(config_err!("selection probabilities must not be empty"));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(config_err!("selection probabilities must be finite and >= 0: {p:?}"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(config_err!("selection probabilities sum to {sum}, not 1"));
        }
        Ok(SelectionProbabilities(p))
    }

    pub fn uniform(m: usize) -> Self {
        SelectionProbabilities(vec![1.0 / m as f64; m])
    }

    /// All mass on modality `k` of `m`.
    pub fn one_hot(m: usize, k: usize) -> Self {
        let mut p = vec![0.0; m];
        p[k] = 1.0;
        SelectionProbabilities(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn draw(&self, cumulative: &[f64], rng: &mut Rng) -> u16 {
        let u: f64 = rng.random();
        match cumulative.iter().position(|&c| u < c) {
            Some(k) => k as u16,
            // Rounding left the total a hair under 1.
            None => self.0.iter().rposition(|&v| v > 0.0).unwrap_or(0) as u16,
        }
    }
}

/// Selected modality per coordinate of a `[rows x cols]` feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionMask {
    rows: usize,
    cols: usize,
    modalities: usize,
    selected: Vec<u16>,
}

impl FusionMask {
    /// Builds a mask from binary tensors, validating the partition property.
    pub fn from_binary(masks: &[Tensor]) -> Result<Self> {
        let first = masks.first().ok_or_else(|| input_err!("no masks"))?;
        let &[rows, cols] = first.shape() else {
            return Err(input_err!("masks must be 2-D"));
        };
        if masks.iter().any(|m| m.shape() != first.shape()) {
            return Err(input_err!("masks disagree in shape"));
        }
        let mut selected = Vec::with_capacity(rows * cols);
        for idx in 0..rows * cols {
            let mut hit = None;
            for (k, m) in masks.iter().enumerate() {
                match m.data()[idx] {
                    0.0 => {}
                    1.0 if hit.is_none() => hit = Some(k as u16),
                    v => return Err(input_err!("mask entry {v} at {idx} breaks the one-hot partition")),
                }
            }
            selected.push(hit.ok_or_else(|| input_err!("no modality selected at {idx}"))?);
        }
        Ok(FusionMask {
            rows,
            cols,
            modalities: masks.len(),
            selected,
        })
    }

    /// Stacks per-sample masks row-wise, matching row-stacked features.
    pub fn concat_rows(masks: &[FusionMask]) -> Result<Self> {
        let first = masks.first().ok_or_else(|| input_err!("no masks"))?;
        if masks.iter().any(|m| m.cols != first.cols || m.modalities != first.modalities) {
            return Err(input_err!("masks disagree in width or modality count"));
        }
        Ok(FusionMask {
            rows: masks.iter().map(|m| m.rows).sum(),
            cols: first.cols,
            modalities: first.modalities,
            selected: masks.iter().flat_map(|m| m.selected.iter().copied()).collect(),
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    /// Modality index chosen at each coordinate, row-major.
    pub fn selected(&self) -> &[u16] {
        &self.selected
    }

    /// Binary mask `r_k`.
    pub fn binary(&self, k: usize) -> Tensor {
        let data = self
            .selected
            .iter()
            .map(|&s| if s as usize == k { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask shape is consistent")
    }

    pub fn binary_masks(&self) -> Vec<Tensor> {
        (0..self.modalities).map(|k| self.binary(k)).collect()
    }
}

/// Draws one modality per coordinate of a `shape` map, independently.
pub fn sample_masks(p: &SelectionProbabilities, shape: [usize; 2], rng: &mut Rng) -> Result<FusionMask> {
    let p = SelectionProbabilities::new(p.0.clone())?;
    if p.len() > u16::MAX as usize {
        return Err(config_err!("too many modalities: {}", p.len()));
    }
    let cumulative: Vec<f64> = p
        .0
        .iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let n = shape[0] * shape[1];
    let selected = (0..n).map(|_| p.draw(&cumulative, rng)).collect();
    Ok(FusionMask {
        rows: shape[0],
        cols: shape[1],
        modalities: p.len(),
        selected,
    })
}

fn check_docked(docked: &[Tensor], mask: &FusionMask) -> Result<()> {
    if docked.len() != mask.modalities {
        return Err(internal_err!(
            "{} docked features for a {}-modality mask",
            docked.len(),
            mask.modalities
        ));
    }
    if let Some(d) = docked.iter().find(|d| d.shape() != mask.shape()) {
        return Err(internal_err!(
            "docked feature {:?} does not match mask {:?}",
            d.shape(),
            mask.shape()
        ));
    }
    Ok(())
}

/// `e = sum_k r_k * d_k`.
pub fn embrace_forward(docked: &[Tensor], mask: &FusionMask) -> Result<Tensor> {
    check_docked(docked, mask)?;
    let mut fused = Tensor::zeros(&mask.shape());
    for (idx, (out, &k)) in fused.data_mut().iter_mut().zip(&mask.selected).enumerate() {
        *out = docked[k as usize].data()[idx];
    }
    Ok(fused)
}

/// `grad d_k = r_k * grad e`; masks are constants of the backward pass.
pub fn embrace_backward(grad_fused: &Tensor, mask: &FusionMask) -> Result<Vec<Tensor>> {
    if grad_fused.shape() != mask.shape() {
        return Err(internal_err!(
            "fused gradient {:?} does not match mask {:?}",
            grad_fused.shape(),
            mask.shape()
        ));
    }
    let mut grads = vec![Tensor::zeros(&mask.shape()); mask.modalities];
    for (idx, (&g, &k)) in grad_fused.data().iter().zip(&mask.selected).enumerate() {
        grads[k as usize].data_mut()[idx] = g;
    }
    Ok(grads)
}

/// Mask-free expectation `sum_k p_k d_k`, for inspecting a trained model.
pub fn expected_fusion(docked: &[Tensor], p: &SelectionProbabilities) -> Result<Tensor> {
    let first = docked.first().ok_or_else(|| internal_err!("no docked features"))?;
    if docked.len() != p.len() || docked.iter().any(|d| d.shape() != first.shape()) {
        return Err(internal_err!("docked features do not match probabilities"));
    }
    let mut fused = Tensor::zeros(first.shape());
    for (d, &pk) in docked.iter().zip(p.as_slice()) {
        fused.add_scaled(d, pk);
    }
    Ok(fused)
}

/// Channel-axis concatenation of the raw sensor arrays, in `modalities` order.
pub fn early_fuse(sample: &SensorSample, modalities: &[Modality]) -> Result<Tensor> {
    let parts = modalities
        .iter()
        .map(|&m| sample.get(m))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_cols(&parts)
}

/// Last-axis concatenation of per-modality encoder features.
pub fn intermediate_fuse(features: &[Tensor]) -> Result<Tensor> {
    let first = features.first().ok_or_else(|| internal_err!("no features"))?;
    if features.iter().any(|h| h.shape() != first.shape()) {
        return Err(internal_err!("encoder features disagree in shape"));
    }
    let refs: Vec<&Tensor> = features.iter().collect();
    Tensor::concat_cols(&refs)
}

pub fn intermediate_backward(grad: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    grad.split_cols(widths)
}

/// Elementwise mean of per-model class probabilities.
pub fn late_fuse(per_model: &[Tensor]) -> Result<Tensor> {
    let first = per_model
        .first()
        .ok_or_else(|| input_err!("late fusion needs at least one model output"))?;
    if per_model.iter().any(|p| p.shape() != first.shape()) {
        return Err(input_err!("model outputs disagree in shape"));
    }
    let mut mean = Tensor::zeros(first.shape());
    for p in per_model {
        mean.add_scaled(p, 1.0);
    }
    mean.scale(1.0 / per_model.len() as f64);
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use std::collections::BTreeMap;

    fn rng(i: u64) -> Rng {
        substream(11, Stream::Test, &[i])
    }

    #[test]
    fn probability_validation() {
        assert!(SelectionProbabilities::new(vec![0.5, 0.5]).is_ok());
        assert!(SelectionProbabilities::new(vec![0.5, 0.6]).is_err());
        assert!(SelectionProbabilities::new(vec![-0.1, 1.1]).is_err());
        assert!(SelectionProbabilities::new(vec![]).is_err());
        let u = SelectionProbabilities::uniform(7);
        assert!((u.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_distribution_selects_first() {
        let mask = sample_masks(&SelectionProbabilities::new(vec![1.0, 0.0]).unwrap(), [5, 16], &mut rng(0)).unwrap();
        assert!(mask.binary(0).data().iter().all(|&v| v == 1.0));
        assert!(mask.binary(1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_masks_partition_every_coordinate() {
        let mask = sample_masks(&SelectionProbabilities::uniform(7), [5, 256], &mut rng(1)).unwrap();
        let masks = mask.binary_masks();
        for idx in 0..5 * 256 {
            let total: f64 = masks.iter().map(|m| m.data()[idx]).sum();
            assert_eq!(total, 1.0);
        }
        assert_eq!(FusionMask::from_binary(&masks).unwrap(), mask);
    }

    #[test]
    fn empirical_frequencies_follow_p() {
        let p = SelectionProbabilities::new(vec![0.5, 0.3, 0.2]).unwrap();
        let mask = sample_masks(&p, [100, 1000], &mut rng(2)).unwrap();
        let mut counts = [0usize; 3];
        for &k in mask.selected() {
            counts[k as usize] += 1;
        }
        for (c, target) in counts.iter().zip(p.as_slice()) {
            let freq = *c as f64 / 1e5;
            assert!((freq - target).abs() < 0.01, "{freq} vs {target}");
        }
    }

    #[test]
    fn from_binary_rejects_overlap_and_gaps() {
        let ones = Tensor::filled(&[1, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 2]);
        assert!(FusionMask::from_binary(&[ones.clone(), ones.clone()]).is_err());
        assert!(FusionMask::from_binary(&[zeros.clone(), zeros]).is_err());
        assert!(FusionMask::from_binary(&[Tensor::filled(&[1, 2], 0.5)]).is_err());
    }

    #[test]
    fn identical_features_survive_any_mask() {
        let d = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 7.0, -1.0]).unwrap();
        let docked = vec![d.clone(); 4];
        for i in 0..10 {
            let mask = sample_masks(&SelectionProbabilities::uniform(4), [2, 3], &mut rng(100 + i)).unwrap();
            assert_eq!(embrace_forward(&docked, &mask).unwrap(), d);
        }
    }

    #[test]
    fn one_hot_selection_copies_modality() {
        let a = Tensor::filled(&[5, 4], 2.0);
        let b = Tensor::filled(&[5, 4], -3.0);
        let mask = sample_masks(&SelectionProbabilities::one_hot(2, 0), [5, 4], &mut rng(3)).unwrap();
        assert_eq!(embrace_forward(&[a.clone(), b], &mask).unwrap(), a);

        let g = Tensor::new(vec![5, 4], (0..20).map(f64::from).collect()).unwrap();
        let grads = embrace_backward(&g, &mask).unwrap();
        assert_eq!(grads[0], g);
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_gradients_partition_upstream() {
        let mask = sample_masks(&SelectionProbabilities::uniform(3), [5, 8], &mut rng(4)).unwrap();
        let g = Tensor::new(vec![5, 8], (0..40).map(|v| f64::from(v) * 0.37 - 4.0).collect()).unwrap();
        let grads = embrace_backward(&g, &mask).unwrap();
        let mut total = Tensor::zeros(&[5, 8]);
        for gk in &grads {
            total.add_scaled(gk, 1.0);
        }
        assert_eq!(total, g);
        assert!(embrace_backward(&Tensor::zeros(&[5, 8]), &mask)
            .unwrap()
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(embrace_backward(&Tensor::zeros(&[4, 8]), &mask).is_err());
    }

    #[test]
    fn mean_of_fused_converges_to_expectation() {
        let docked = [Tensor::filled(&[5, 8], 1.0), Tensor::zeros(&[5, 8])];
        let p = SelectionProbabilities::uniform(2);
        let draws = 10_000;
        let mut sum = Tensor::zeros(&[5, 8]);
        for i in 0..draws {
            let mask = sample_masks(&p, [5, 8], &mut rng(1000 + i)).unwrap();
            sum.add_scaled(&embrace_forward(&docked, &mask).unwrap(), 1.0);
        }
        for &v in sum.data() {
            assert!((v / draws as f64 - 0.5).abs() < 0.02);
        }
        let expected = expected_fusion(&docked, &p).unwrap();
        assert!(expected.data().iter().all(|&v| v == 0.5));
    }

    fn sample_with(parts: &[(Modality, f64)], len: usize) -> SensorSample {
        let map: BTreeMap<_, _> = parts
            .iter()
            .map(|&(m, v)| (m, Tensor::filled(&[len, m.channels()], v)))
            .collect();
        SensorSample::new(map, None)
    }

    #[test]
    fn early_fusion_concatenates_channels() {
        let s = sample_with(&[(Modality::Accelerometer, 1.0), (Modality::Gravity, 2.0)], 500);
        let x = early_fuse(&s, &[Modality::Accelerometer, Modality::Gravity]).unwrap();
        assert_eq!(x.shape(), &[500, 6]);
        for r in [0, 250, 499] {
            assert_eq!(x.row(r), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        }
        assert!(matches!(
            early_fuse(&s, &[Modality::Pressure]),
            Err(crate::Error::Input(_))
        ));

        let all = sample_with(&Modality::ALL.map(|m| (m, 0.0)), 500);
        assert_eq!(early_fuse(&all, &Modality::ALL).unwrap().shape(), &[500, 20]);

        let pressure = sample_with(&[(Modality::Pressure, 3.5)], 500);
        assert_eq!(
            &early_fuse(&pressure, &[Modality::Pressure]).unwrap(),
            pressure.get(Modality::Pressure).unwrap()
        );
    }

    #[test]
    fn intermediate_fusion_concatenates_features() {
        let a = Tensor::new(vec![5, 2], (0..10).map(f64::from).collect()).unwrap();
        let b = Tensor::new(vec![5, 2], (10..20).map(f64::from).collect()).unwrap();
        let x = intermediate_fuse(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(x.row(0), &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(intermediate_fuse(&[a.clone()]).unwrap(), a);
        let parts = intermediate_backward(&x, &[2, 2]).unwrap();
        assert_eq!(parts, vec![a, b]);

        let h = vec![Tensor::zeros(&[5, 256]); 7];
        assert_eq!(intermediate_fuse(&h).unwrap().shape(), &[5, 1792]);
    }

    #[test]
    fn late_fusion_averages() {
        let mut a = Tensor::zeros(&[1, 8]);
        a.data_mut()[0] = 1.0;
        let mut b = Tensor::zeros(&[1, 8]);
        b.data_mut()[1] = 1.0;
        let avg = late_fuse(&[a.clone(), b]).unwrap();
        assert_eq!(&avg.data()[..3], &[0.5, 0.5, 0.0]);
        assert_eq!(late_fuse(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        assert!(late_fuse(&[]).is_err());
    }
}

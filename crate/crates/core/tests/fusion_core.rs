use embracenet::fusion::{
    embrace_backward, embrace_forward, expected_fusion, late_fuse, sample_masks, FusionMask, SelectionProbabilities,
};
use embracenet::ops::softmax_rows;
use embracenet::rng::{substream, Stream};
use embracenet::Tensor;
use proptest::prelude::*;

fn features(m: usize, shape: [usize; 2]) -> impl Strategy<Value = Vec<Tensor>> {
    let n = shape[0] * shape[1];
    proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, n), m)
        .prop_map(move |ds| ds.into_iter().map(|d| Tensor::new(shape.to_vec(), d).unwrap()).collect())
}

fn mask(m: usize, shape: [usize; 2], seed: u64) -> FusionMask {
    sample_masks(&SelectionProbabilities::uniform(m), shape, &mut substream(seed, Stream::Test, &[20])).unwrap()
}

#[test]
fn mask_partition_holds_over_many_coordinates() {
    for m in [2, 3, 7] {
        let mask = mask(m, [250, 400], m as u64);
        let binary = mask.binary_masks();
        for i in 0..250 * 400 {
            let total: f64 = binary.iter().map(|b| b.data()[i]).sum();
            assert_eq!(total, 1.0, "m={m}, coordinate {i}");
        }
    }
}

#[test]
fn fused_mean_error_shrinks_like_inverse_sqrt() {
    // Three modalities with distinct constant features; E[e] = mean of d.
    let shape = [5, 16];
    let docked: Vec<Tensor> = [0.0, 1.0, 5.0].iter().map(|&v| Tensor::filled(&shape, v)).collect();
    let p = SelectionProbabilities::uniform(3);
    let target = expected_fusion(&docked, &p).unwrap();
    // Per-draw variance of one coordinate is mean(d^2) - mean(d)^2.
    let sigma = ((0.0 + 1.0 + 25.0) / 3.0 - 4.0f64).sqrt();
    let mut rms = Vec::new();
    for (run, n) in [100usize, 10_000].into_iter().enumerate() {
        let mut rng = substream(run as u64, Stream::Test, &[21]);
        let mut sum = Tensor::zeros(&shape);
        for _ in 0..n {
            let mask = sample_masks(&p, shape, &mut rng).unwrap();
            sum.add_scaled(&embrace_forward(&docked, &mask).unwrap(), 1.0);
        }
        sum.scale(1.0 / n as f64);
        let mse = sum.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / sum.len() as f64;
        let expected_se = sigma / (n as f64).sqrt();
        let ratio = mse.sqrt() / expected_se;
        assert!((0.5..2.0).contains(&ratio), "n={n}: rms error {} vs standard error {expected_se}", mse.sqrt());
        rms.push(mse.sqrt());
    }
    // 100x more draws: about 10x smaller error.
    let shrink = rms[0] / rms[1];
    assert!((5.0..20.0).contains(&shrink), "shrink factor {shrink}");
}

#[test]
fn two_modality_average_is_one_half() {
    let shape = [5, 8];
    let docked = vec![Tensor::filled(&shape, 1.0), Tensor::zeros(&shape)];
    let p = SelectionProbabilities::uniform(2);
    let mut rng = substream(3, Stream::Test, &[22]);
    let draws = 10_000;
    let mut sum = Tensor::zeros(&shape);
    for _ in 0..draws {
        sum.add_scaled(&embrace_forward(&docked, &sample_masks(&p, shape, &mut rng).unwrap()).unwrap(), 1.0);
    }
    let mean = sum.data().iter().sum::<f64>() / (sum.len() * draws) as f64;
    assert!((mean - 0.5).abs() <= 0.02, "{mean}");
}

#[test]
fn one_hot_probabilities_copy_the_chosen_modality_bit_for_bit() {
    let shape = [5, 32];
    let docked: Vec<Tensor> = (0..7)
        .map(|k| Tensor::new(shape.to_vec(), (0..160).map(|i| (i as f64 * 0.37 + k as f64).sin()).collect()).unwrap())
        .collect();
    for k in 0..7 {
        let mask = sample_masks(&SelectionProbabilities::one_hot(7, k), shape, &mut substream(k as u64, Stream::Test, &[23])).unwrap();
        let fused = embrace_forward(&docked, &mask).unwrap();
        assert!(fused.data().iter().zip(docked[k].data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn late_fusion_of_two_one_hot_rows() {
    let a = Tensor::new(vec![1, 8], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let b = Tensor::new(vec![1, 8], vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let fused = late_fuse(&[a, b]).unwrap();
    assert_eq!(fused.data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embrace_is_linear_in_docked_features(
        d in features(4, [5, 6]),
        v in features(4, [5, 6]),
        coef in features(1, [5, 6]),
        seed in 0u64..1000,
    ) {
        // Directional derivative of <coef, e> along v versus the backward pass.
        let mask = mask(4, [5, 6], seed);
        let grads = embrace_backward(&coef[0], &mask).unwrap();
        let analytic: f64 = grads.iter().zip(&v).map(|(g, vk)| g.data().iter().zip(vk.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
        let h = 1e-3;
        let shifted = |sign: f64| {
            let moved: Vec<Tensor> = d.iter().zip(&v).map(|(dk, vk)| {
                let mut t = dk.clone();
                t.add_scaled(vk, sign * h);
                t
            }).collect();
            let e = embrace_forward(&moved, &mask).unwrap();
            e.data().iter().zip(coef[0].data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        prop_assert!((numeric - analytic).abs() <= 1e-8 * analytic.abs().max(1.0));
    }

    #[test]
    fn backward_partitions_the_upstream_gradient(g in features(1, [5, 9]), seed in 0u64..1000) {
        let mask = mask(7, [5, 9], seed);
        let grads = embrace_backward(&g[0], &mask).unwrap();
        for i in 0..45 {
            let total: f64 = grads.iter().map(|t| t.data()[i]).sum();
            prop_assert_eq!(total, g[0].data()[i]);
        }
    }

    #[test]
    fn late_fusion_keeps_rows_normalized(logits in features(7, [5, 8])) {
        let probs: Vec<Tensor> = logits.iter().map(softmax_rows).collect();
        let fused = late_fuse(&probs).unwrap();
        for r in 0..5 {
            prop_assert!((fused.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

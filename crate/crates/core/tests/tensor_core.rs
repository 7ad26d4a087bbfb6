use embracenet::checks::{gradcheck_suite, SuiteOptions};
use embracenet::gradcheck::{gradient_check, GradCheckOptions};
use embracenet::ops;
use embracenet::params::ParameterStore;
use embracenet::rng::{substream, Stream};
use embracenet::{ModelConfig, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn random(seed: u64, tag: u64, shape: &[usize]) -> Tensor {
    let mut rng = substream(seed, Stream::Test, &[100, tag]);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-3.0..3.0f64, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

#[test]
fn same_padding_length_law() {
    for stride in [1usize, 2, 5] {
        for len in 1usize..=600 {
            let want = len.div_ceil(stride);
            assert_eq!(ops::same_output_len(len, stride), want, "L={len} s={stride}");
        }
    }
    // The convolution itself follows the law, not just the helper.
    for (len, stride) in [(1usize, 5usize), (7, 2), (13, 5), (500, 5)] {
        let x = random(0, 1, &[len, 2]);
        let y = ops::conv1d_forward(&x, &random(0, 2, &[5, 2, 3]), &Tensor::zeros(&[3]), stride).unwrap();
        assert_eq!(y.shape(), &[len.div_ceil(stride), 3]);
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_gradients_match_finite_differences_tightly() {
    // 20x3 input, 4 filters, stride 2; the loss is a fixed linear read-out.
    let mut store = ParameterStore::new();
    let x = store.insert("x", random(1, 1, &[20, 3])).unwrap();
    let w = store.insert("w", random(1, 2, &[5, 3, 4])).unwrap();
    let b = store.insert("b", random(1, 3, &[4])).unwrap();
    let coef = random(1, 4, &[10, 4]);
    let opts = GradCheckOptions {
        tolerance: 1e-6,
        ..Default::default()
    };
    let report = gradient_check(
        "conv",
        &mut store,
        |s| Ok(dot(&ops::conv1d_forward(s.value(x), s.value(w), s.value(b), 2)?, &coef)),
        |s| {
            let g = ops::conv1d_backward(&coef, s.value(x), s.value(w), 2, true)?;
            s.accumulate(x, &g.input.unwrap(), 1.0)?;
            s.accumulate(w, &g.weights, 1.0)?;
            s.accumulate(b, &g.bias, 1.0)
        },
        &opts,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn dense_gradients_match_finite_differences_tightly() {
    let mut store = ParameterStore::new();
    let x = store.insert("x", random(2, 1, &[5, 6])).unwrap();
    let w = store.insert("w", random(2, 2, &[6, 3])).unwrap();
    let b = store.insert("b", random(2, 3, &[3])).unwrap();
    let coef = random(2, 4, &[5, 3]);
    let opts = GradCheckOptions {
        tolerance: 1e-6,
        ..Default::default()
    };
    let report = gradient_check(
        "dense",
        &mut store,
        |s| Ok(dot(&ops::dense_forward(s.value(x), s.value(w), s.value(b))?, &coef)),
        |s| {
            let g = ops::dense_backward(&coef, s.value(x), s.value(w), true)?;
            s.accumulate(x, &g.input.unwrap(), 1.0)?;
            s.accumulate(w, &g.weights, 1.0)?;
            s.accumulate(b, &g.bias, 1.0)
        },
        &opts,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn conv_relu_dense_softmax_chain_gradients() {
    let mut store = ParameterStore::new();
    let w1 = store.insert("conv.w", random(3, 1, &[5, 3, 4])).unwrap();
    let b1 = store.insert("conv.b", random(3, 2, &[4]).map(|v| 0.2 + 0.1 * v)).unwrap();
    let w2 = store.insert("dense.w", random(3, 3, &[4, 8])).unwrap();
    let b2 = store.insert("dense.b", random(3, 4, &[8])).unwrap();
    let input = random(3, 5, &[20, 3]);
    let labels = [1, 7, 3, 0, 5, 2, 2, 6, 4, 1];
    let forward = |s: &ParameterStore| -> embracenet::Result<(Tensor, Tensor, Tensor)> {
        let z = ops::conv1d_forward(&input, s.value(w1), s.value(b1), 2)?;
        let h = ops::relu(&z);
        let probs = ops::softmax_rows(&ops::dense_forward(&h, s.value(w2), s.value(b2))?);
        Ok((z, h, probs))
    };
    let report = gradient_check(
        "chain",
        &mut store,
        |s| ops::cross_entropy(&forward(s)?.2, &labels),
        |s| {
            let (z, h, probs) = forward(s)?;
            let g_logits = ops::softmax_cross_entropy_backward(&probs, &labels)?;
            let gd = ops::dense_backward(&g_logits, &h, s.value(w2), true)?;
            s.accumulate(w2, &gd.weights, 1.0)?;
            s.accumulate(b2, &gd.bias, 1.0)?;
            let gz = ops::relu_backward(&gd.input.unwrap(), &z);
            let gc = ops::conv1d_backward(&gz, &input, s.value(w1), 2, false)?;
            s.accumulate(w1, &gc.weights, 1.0)?;
            s.accumulate(b1, &gc.bias, 1.0)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn gradient_suite_passes_for_twenty_seeds() {
    for seed in 0..20 {
        let opts = SuiteOptions {
            seed,
            ..Default::default()
        };
        for r in gradcheck_suite(&ModelConfig::tiny(), &opts).unwrap() {
            assert!(r.passed(), "seed {seed}: {r}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_without_bias(
        x in tensor(vec![17, 3]),
        y in tensor(vec![17, 3]),
        w in tensor(vec![5, 3, 4]),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
        stride in prop_oneof![Just(1usize), Just(2), Just(5)],
    ) {
        let zero = Tensor::zeros(&[4]);
        let mut mix = x.clone();
        mix.scale(a);
        mix.add_scaled(&y, b);
        let lhs = ops::conv1d_forward(&mix, &w, &zero, stride).unwrap();
        let mut rhs = ops::conv1d_forward(&x, &w, &zero, stride).unwrap();
        rhs.scale(a);
        rhs.add_scaled(&ops::conv1d_forward(&y, &w, &zero, stride).unwrap(), b);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-1000.0..1000.0f64, 8), 1..6)) {
        let t = Tensor::from_rows(&rows).unwrap();
        let p = ops::softmax_rows(&t);
        for r in 0..p.rows() {
            prop_assert!(p.row(r).iter().all(|v| *v >= 0.0 && v.is_finite()));
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

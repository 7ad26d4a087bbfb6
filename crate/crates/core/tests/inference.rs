use std::fs;

use embracenet::data::{synth_samples, Modality, SensorSample, SynthConfig};
use embracenet::inference::{predict_all, predict_dataset, self_ensemble_predict, EnsembleConfig};
use embracenet::rng::{substream, Stream};
use embracenet::train::evaluate;
use embracenet::{Model, ModelConfig, Tensor};

fn tiny_samples(n: usize, seed: u64) -> Vec<SensorSample> {
    synth_samples(&SynthConfig { samples: n, length: 20, noise: 0.5, seed, ..Default::default() }).unwrap()
}

fn draw(model: &Model, sample: &SensorSample, seed: u64, index: usize, d: usize) -> Tensor {
    let mut rng = substream(seed, Stream::Ensemble, &[index as u64, d as u64]);
    model.forward(sample, &mut rng).unwrap().probs().tensor().clone()
}

#[test]
fn single_member_ensemble_is_one_forward_pass() {
    let model = Model::build(&ModelConfig::tiny(), 1).unwrap();
    let data = tiny_samples(3, 1);
    for (i, s) in data.iter().enumerate() {
        let p = self_ensemble_predict(&model, s, i, &EnsembleConfig::new(1, 7).unwrap()).unwrap();
        assert_eq!(p.probs.tensor(), &draw(&model, s, 7, i, 0));
        assert_eq!(p.classes, p.probs.predict());
    }
}

#[test]
fn smaller_ensembles_are_prefixes() {
    let model = Model::build(&ModelConfig::tiny(), 2).unwrap();
    let s = &tiny_samples(1, 2)[0];
    let draws: Vec<Tensor> = (0..8).map(|d| draw(&model, s, 3, 0, d)).collect();
    for n in [2usize, 4, 8] {
        let mut want = draws[0].clone();
        for t in &draws[1..n] {
            want.add_scaled(t, 1.0);
        }
        want.scale(1.0 / n as f64);
        let got = self_ensemble_predict(&model, s, 0, &EnsembleConfig::new(n, 3).unwrap()).unwrap();
        assert_eq!(got.probs.tensor(), &want, "n={n}");
    }
}

#[test]
fn deterministic_models_ignore_ensemble_size() {
    let model = Model::build(&ModelConfig::tiny().with_modalities(&[Modality::Accelerometer]), 3).unwrap();
    let data = tiny_samples(4, 3);
    let one = predict_all(&model, &data, &EnsembleConfig::new(1, 0).unwrap()).unwrap();
    for n in [2, 5, 16] {
        assert_eq!(predict_all(&model, &data, &EnsembleConfig::new(n, 9).unwrap()).unwrap(), one, "n={n}");
    }
}

#[test]
fn ensemble_spread_shrinks_with_size() {
    // Spread across ensemble seeds of one averaged output coordinate set.
    let model = Model::build(&ModelConfig::tiny(), 4).unwrap();
    let s = &tiny_samples(1, 4)[0];
    let seeds = 150;
    let spread = |n: usize| -> f64 {
        let outs: Vec<Tensor> = (0..seeds)
            .map(|seed| self_ensemble_predict(&model, s, 0, &EnsembleConfig::new(n, seed).unwrap()).unwrap().probs.into_tensor())
            .collect();
        let len = outs[0].len();
        let mut var = 0.0;
        for i in 0..len {
            let mean = outs.iter().map(|t| t.data()[i]).sum::<f64>() / seeds as f64;
            var += outs.iter().map(|t| (t.data()[i] - mean).powi(2)).sum::<f64>() / (seeds - 1) as f64;
        }
        (var / len as f64).sqrt()
    };
    let (s1, s4, s16) = (spread(1), spread(4), spread(16));
    assert!(s1 > 0.0);
    assert!((1.6..2.5).contains(&(s1 / s4)), "n=1 {s1}, n=4 {s4}");
    assert!((3.2..5.0).contains(&(s1 / s16)), "n=1 {s1}, n=16 {s16}");
}

#[test]
fn evaluate_and_predict_agree() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(&ModelConfig::tiny(), 5).unwrap();
    let data = tiny_samples(6, 5);
    let cfg = EnsembleConfig::new(3, 1).unwrap();
    let out = dir.path().join("pred.txt");
    let (preds, metrics) = predict_dataset(&model, &data, &cfg, &out, None).unwrap();
    assert_eq!(metrics.unwrap(), evaluate(&model, &data, &cfg).unwrap());
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 6);
    for (line, p) in text.lines().zip(&preds) {
        let classes: Vec<usize> = line.split(' ').map(|v| v.parse::<usize>().unwrap() - 1).collect();
        assert_eq!(classes, p.classes);
    }
}

#[test]
fn unlabelled_data_has_no_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(&ModelConfig::tiny(), 6).unwrap();
    let mut data = tiny_samples(3, 6);
    for s in &mut data {
        s.labels = None;
    }
    let (preds, metrics) =
        predict_dataset(&model, &data, &EnsembleConfig::default(), &dir.path().join("p.txt"), None).unwrap();
    assert_eq!(preds.len(), 3);
    assert!(metrics.is_none());
    assert!(evaluate(&model, &data, &EnsembleConfig::default()).is_err());
    assert!(EnsembleConfig::new(0, 0).is_err());
}

#[test]
fn prediction_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(&ModelConfig::tiny(), 7).unwrap();
    let data = tiny_samples(5, 7);
    let cfg = EnsembleConfig::new(4, 2).unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let (out, probs) = (dir.path().join(format!("p{run}.txt")), dir.path().join(format!("q{run}.txt")));
        predict_dataset(&model, &data, &cfg, &out, Some(&probs)).unwrap();
        files.push((fs::read(out).unwrap(), fs::read(probs).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    let probs_text = String::from_utf8(files[0].1.clone()).unwrap();
    for line in probs_text.lines() {
        let v: Vec<f64> = line.split(' ').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 40);
        for row in v.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

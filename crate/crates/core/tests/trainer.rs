use std::collections::BTreeMap;
use std::fs;

use embracenet::data::{synth_samples, SensorSample, SynthConfig};
use embracenet::inference::{score, EnsembleConfig, Prediction};
use embracenet::model::{uniform_loss, ClassProbabilities, MaskSource};
use embracenet::rng::{substream, Stream};
use embracenet::train::{checkpoint_path, evaluate, train_run, train_step, TrainConfig, LOSS_TRACE, METRICS_LOG};
use embracenet::{Error, Model, ModelConfig, Tensor};
use rand::Rng as _;

fn tiny_samples(n: usize, seed: u64, noise: f64) -> Vec<SensorSample> {
    synth_samples(&SynthConfig { samples: n, length: 20, noise, seed, ..Default::default() }).unwrap()
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn untrained_loss_is_near_uniform() {
    let model = Model::build(&ModelConfig::base(), 0).unwrap();
    let samples = synth_samples(&SynthConfig { samples: 8, noise: 0.5, ..Default::default() }).unwrap();
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let pass = model.forward(s, &mut substream(0, Stream::Test, &[30, i as u64])).unwrap();
        total += model.loss(&pass, s.labels().unwrap()).unwrap();
    }
    let mean = total / samples.len() as f64;
    assert!((mean - uniform_loss(8)).abs() <= 0.5, "{mean} vs ln 8");
}

#[test]
fn two_samples_can_be_memorized() {
    let samples = synth_samples(&SynthConfig { samples: 2, noise: 0.3, seed: 1, ..Default::default() }).unwrap();
    let cfg = TrainConfig { batch_size: 2, lr0: 1e-3, ..Default::default() };
    let mut model = Model::build(&ModelConfig::base(), 2).unwrap();
    let mut last = f64::INFINITY;
    for step in 0..200 {
        last = train_step(&mut model, &samples, step, &cfg).unwrap();
    }
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn single_sample_descent_across_seeds() {
    // A few Adam steps on one sample should lower its loss for almost every
    // initialization despite the random masks.
    let mut improved = 0;
    for seed in 0..100 {
        let sample = tiny_samples(1, seed, 0.3);
        let cfg = TrainConfig { batch_size: 1, lr0: 1e-3, seed, ..Default::default() };
        let mut model = Model::build(&ModelConfig::tiny(), seed).unwrap();
        let loss_of = |m: &Model| {
            let pass = m.forward_with(&sample[0], MaskSource::Expected).unwrap();
            m.loss(&pass, sample[0].labels().unwrap()).unwrap()
        };
        let before = loss_of(&model);
        for step in 0..20 {
            train_step(&mut model, &sample, step, &cfg).unwrap();
        }
        if loss_of(&model) <= before {
            improved += 1;
        }
    }
    assert!(improved >= 95, "{improved}/100 seeds improved");
}

#[test]
fn runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { batch_size: 4, total_steps: 6, eval_interval: 3, augment: true, ..Default::default() };
    let data = tiny_samples(8, 3, 0.2);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let s = train_run(&cfg, &ModelConfig::tiny(), data.clone(), None, &out, None, &mut quiet()).unwrap();
        (s.losses, fs::read(out.join(LOSS_TRACE)).unwrap(), fs::read(s.final_checkpoint).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn accuracy_is_the_confusion_trace_share() {
    let model = Model::build(&ModelConfig::tiny(), 4).unwrap();
    let data = tiny_samples(16, 4, 0.5);
    let m = evaluate(&model, &data, &EnsembleConfig::new(2, 0).unwrap()).unwrap();
    let total: u64 = m.confusion.iter().flatten().sum();
    let trace: u64 = (0..8).map(|c| m.confusion[c][c]).sum();
    assert_eq!(total, 16 * 5);
    assert_eq!(m.overall, trace as f64 / total as f64);
    let mut truth = [0u64; 8];
    for s in &data {
        for &l in s.labels().unwrap() {
            truth[l] += 1;
        }
    }
    for c in 0..8 {
        assert_eq!(m.confusion[c].iter().sum::<u64>(), truth[c]);
    }
}

#[test]
fn random_guessing_scores_one_eighth() {
    let mut rng = substream(0, Stream::Test, &[31]);
    let n = 2_000;
    let mut samples = Vec::new();
    let mut predictions = Vec::new();
    for _ in 0..n {
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..8)).collect();
        let classes: Vec<usize> = (0..5).map(|_| rng.random_range(0..8)).collect();
        let mut probs = Tensor::zeros(&[5, 8]);
        for (r, &c) in classes.iter().enumerate() {
            probs.row_mut(r)[c] = 1.0;
        }
        samples.push(SensorSample::new(BTreeMap::new(), Some(labels)));
        predictions.push(Prediction { probs: ClassProbabilities::new(probs).unwrap(), classes });
    }
    let m = score(&predictions, &samples, 8).unwrap();
    assert_eq!(m.segments, 10_000);
    assert!((m.overall - 0.125).abs() <= 0.02, "{}", m.overall);
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { total_steps: 0, ..Default::default() };
    let s = train_run(&cfg, &ModelConfig::tiny(), tiny_samples(4, 5, 0.1), None, dir.path(), None, &mut quiet()).unwrap();
    assert_eq!(s.steps, 0);
    assert!(s.losses.is_empty() && s.final_metrics.is_none());
    assert_eq!(s.final_checkpoint, checkpoint_path(dir.path(), 0));
    let names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names, ["step-00000000.ckpt"]);
}

#[test]
fn long_eval_interval_evaluates_once_at_the_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { batch_size: 2, total_steps: 4, eval_interval: 100, checkpoint_interval: 2, ..Default::default() };
    let mut lines = Vec::new();
    let s = train_run(&cfg, &ModelConfig::tiny(), tiny_samples(4, 6, 0.1), None, dir.path(), None, &mut |l: &str| {
        lines.push(l.to_string())
    })
    .unwrap();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("step=4 "), "{}", lines[0]);
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap().lines().count(), 1);
    assert_eq!(fs::read_to_string(dir.path().join(LOSS_TRACE)).unwrap().lines().count(), 4);
    for step in [0, 2, 4] {
        assert!(checkpoint_path(dir.path(), step).exists());
    }
    assert!(s.final_metrics.is_some());
}

#[test]
fn invalid_training_samples_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = tiny_samples(4, 7, 0.1);
    data[2].get_mut(embracenet::data::Modality::Magnetometer).unwrap().data_mut()[0] = f64::NAN;
    let cfg = TrainConfig { batch_size: 2, total_steps: 1, ..Default::default() };
    let s = train_run(&cfg, &ModelConfig::tiny(), data, None, dir.path(), None, &mut quiet()).unwrap();
    assert_eq!(s.dropped, 1);
}

#[test]
fn divergence_aborts_with_a_training_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { batch_size: 2, total_steps: 20, lr0: 1e300, ..Default::default() };
    let err = train_run(&cfg, &ModelConfig::tiny(), tiny_samples(4, 8, 0.1), None, dir.path(), None, &mut quiet())
        .unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { batch_size: 2, total_steps: 1, ..Default::default() };
    let data = tiny_samples(4, 9, 0.1);
    let s = train_run(&cfg, &ModelConfig::tiny(), data.clone(), None, dir.path(), None, &mut quiet()).unwrap();
    let model = embracenet::model::checkpoint::load(&s.final_checkpoint).unwrap();
    let other = ModelConfig::tiny().with_fusion(embracenet::FusionKind::Early);
    let err = train_run(&cfg, &other, data, None, &dir.path().join("x"), Some(model), &mut quiet()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

//! Command-line front end.
//!
//! Every flag has a config-file key of the same name with `-` replaced by
//! `_`; flags win over file values. Exit codes: 0 success, 1 a check failed,
//! 2 usage or configuration error, 3 runtime abort.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checks::{gradcheck_suite, SuiteOptions};
use crate::data::{filter_invalid, load_dataset, synth_generate, DatasetManifest, InputMode, Location, Modality, SynthConfig};
use crate::error::{config_err, Error, Result};
use crate::inference::{predict_dataset, EnsembleConfig};
use crate::model::{checkpoint, FusionKind, ModelConfig};
use crate::train::{train_run, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "embracenet", version, about = "Multimodal activity recognition with EmbraceNet fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic 8-class dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Write predictions for a dataset.
    Predict(PredictArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Key-value run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the class signatures; keep it fixed across splits.
    #[arg(long)]
    pub signature_seed: Option<u64>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub location: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// base, large or tiny.
    #[arg(long)]
    pub preset: Option<String>,
    /// embrace, early, intermediate or late.
    #[arg(long)]
    pub fusion: Option<String>,
    /// raw, fft or raw_and_fft.
    #[arg(long)]
    pub input_mode: Option<String>,
    /// Comma-separated sensor subset (acc,gra,gyr,lacc,mag,ori,pressure).
    #[arg(long)]
    pub sensors: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub decay_interval: Option<u64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Random rotation augmentation of training samples (true/false).
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub ensemble_n: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub ensemble_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics log to append to; defaults to eval.log beside the checkpoint.
    #[arg(long)]
    pub metrics_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub ensemble_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prediction file: five 1-based labels per line.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional file with the 40 probabilities of each sample per line.
    #[arg(long)]
    pub probs_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Perturbs analytic gradients to confirm that failures are reported.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

const PATH_KEYS: &[&str] = &[
    "out_dir",
    "train_manifest",
    "val_manifest",
    "resume",
    "checkpoint",
    "manifest",
    "out",
    "probs_out",
    "metrics_log",
];

const VALUE_KEYS: &[&str] = &[
    "samples",
    "classes",
    "noise",
    "seed",
    "signature_seed",
    "split",
    "location",
    "preset",
    "fusion",
    "input_mode",
    "sensors",
    "batch_size",
    "total_steps",
    "lr0",
    "decay_interval",
    "decay_factor",
    "eval_interval",
    "checkpoint_interval",
    "augment",
    "ensemble_n",
];

/// Parsed `key = value` run configuration. `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfigFile {
    path: Option<PathBuf>,
    /// key -> (value, 1-based line)
    values: BTreeMap<String, (String, usize)>,
}

impl RunConfigFile {
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let shown = path.map_or_else(|| PathBuf::from("<config>"), Path::to_path_buf);
        let err = |line: usize, message: String| Error::Format {
            path: shown.clone(),
            line,
            message,
        };
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(n + 1, format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim().to_string();
            if !PATH_KEYS.contains(&key.as_str()) && !VALUE_KEYS.contains(&key.as_str()) {
                return Err(err(n + 1, format!("unknown key `{key}`")));
            }
            if values.contains_key(&key) {
                return Err(err(n + 1, format!("key `{key}` given twice")));
            }
            values.insert(key, (value.trim().to_string(), n + 1));
        }
        Ok(RunConfigFile {
            path: path.map(Path::to_path_buf),
            values,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Some(path))
    }

    fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Typed value of `key`; parse failures name the key and line.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some((value, line)) = self.values.get(key) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|_| Error::Format {
            path: self.path.clone().unwrap_or_else(|| PathBuf::from("<config>")),
            line: *line,
            message: format!("invalid value {value:?} for `{key}`"),
        })
    }

    /// Path value of `key`, resolved against the config file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let (value, _) = self.values.get(key)?;
        let p = PathBuf::from(value);
        match self.path.as_deref().and_then(Path::parent) {
            Some(dir) if p.is_relative() => Some(dir.join(p)),
            _ => Some(p),
        }
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        let Some((value, line)) = self.values.get(key) else {
            return Ok(None);
        };
        match value.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(Some(true)),
            "false" | "no" | "off" | "0" => Ok(Some(false)),
            _ => Err(Error::Format {
                path: self.path.clone().unwrap_or_else(|| PathBuf::from("<config>")),
                line: *line,
                message: format!("invalid boolean {value:?} for `{key}`"),
            }),
        }
    }
}

fn pick<T: FromStr>(flag: Option<T>, file: &RunConfigFile, key: &str) -> Result<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

fn pick_path(flag: Option<PathBuf>, file: &RunConfigFile, key: &str) -> Option<PathBuf> {
    flag.or_else(|| file.path(key))
}

fn require<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| config_err!("missing `{key}` (flag --{} or config key)", key.replace('_', "-")))
}

fn model_config(args: &ModelArgs, file: &RunConfigFile, default_preset: &str) -> Result<ModelConfig> {
    let preset: String = pick(args.preset.clone(), file, "preset")?.unwrap_or_else(|| default_preset.to_string());
    let mut cfg = ModelConfig::preset(&preset)?;
    if let Some(f) = pick::<String>(args.fusion.clone(), file, "fusion")? {
        cfg = cfg.with_fusion(f.parse::<FusionKind>()?);
    }
    if let Some(m) = pick::<String>(args.input_mode.clone(), file, "input_mode")? {
        cfg = cfg.with_input_mode(m.parse::<InputMode>()?);
    }
    if let Some(list) = pick::<String>(args.sensors.clone(), file, "sensors")? {
        let mods = list.split(',').map(|s| s.trim().parse::<Modality>()).collect::<Result<Vec<_>>>()?;
        cfg = cfg.with_modalities(&mods);
    }
    Ok(cfg)
}

fn load_samples(manifest: &Path) -> Result<(DatasetManifest, Vec<crate::data::SensorSample>)> {
    let m = DatasetManifest::read(manifest)?;
    let samples = load_dataset(&m)?;
    Ok((m, samples))
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let file = RunConfigFile::load_opt(args.config.as_deref())?;
    let defaults = SynthConfig::default();
    let seed = pick(args.seed, &file, "seed")?.unwrap_or(defaults.seed);
    let location: Location = match pick::<String>(args.location, &file, "location")? {
        Some(l) => l.parse()?,
        None => defaults.location,
    };
    let cfg = SynthConfig {
        samples: pick(args.samples, &file, "samples")?.unwrap_or(defaults.samples),
        classes: pick(args.classes, &file, "classes")?.unwrap_or(defaults.classes),
        noise: pick(args.noise, &file, "noise")?.unwrap_or(defaults.noise),
        seed,
        signature_seed: pick(args.signature_seed, &file, "signature_seed")?.unwrap_or(defaults.signature_seed),
        split: pick(args.split, &file, "split")?.unwrap_or(defaults.split),
        location,
        ..defaults
    };
    let out_dir = require(pick_path(args.out_dir, &file, "out_dir"), "out_dir")?;
    println!("seed: {seed}");
    cfg.validate()?;
    let manifest = synth_generate(&cfg, &out_dir).map_err(|e| match e {
        // An unwritable destination is a usage problem, not a runtime abort.
        Error::Io { path, source } => config_err!("cannot write {}: {source}", path.display()),
        other => other,
    })?;
    println!("wrote {} samples: {}", cfg.samples, manifest.display());
    Ok(EXIT_OK)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let file = RunConfigFile::load_opt(args.config.as_deref())?;
    let model_cfg = model_config(&args.model, &file, "base")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: pick(args.batch_size, &file, "batch_size")?.unwrap_or(d.batch_size),
        total_steps: pick(args.total_steps, &file, "total_steps")?.unwrap_or(d.total_steps),
        lr0: pick(args.lr0, &file, "lr0")?.unwrap_or(d.lr0),
        decay_interval: pick(args.decay_interval, &file, "decay_interval")?.unwrap_or(d.decay_interval),
        decay_factor: pick(args.decay_factor, &file, "decay_factor")?.unwrap_or(d.decay_factor),
        seed: pick(args.seed, &file, "seed")?.unwrap_or(d.seed),
        eval_interval: pick(args.eval_interval, &file, "eval_interval")?.unwrap_or(d.eval_interval),
        checkpoint_interval: pick(args.checkpoint_interval, &file, "checkpoint_interval")?
            .unwrap_or(d.checkpoint_interval),
        augment: match args.augment {
            Some(v) => v,
            None => file.bool("augment")?.unwrap_or(d.augment),
        },
        ensemble_n: pick(args.ensemble_n, &file, "ensemble_n")?.unwrap_or(d.ensemble_n),
    };
    cfg.validate()?;
    let train_path = require(pick_path(args.train_manifest, &file, "train_manifest"), "train_manifest")?;
    let out_dir = require(pick_path(args.out_dir, &file, "out_dir"), "out_dir")?;
    let val_path = pick_path(args.val_manifest, &file, "val_manifest");
    let resume = pick_path(args.resume, &file, "resume").map(checkpoint::load).transpose()?;

    println!("seed: {}", cfg.seed);
    println!(
        "model: {} fusion, {} input, {} sensors",
        model_cfg.fusion,
        model_cfg.input_mode,
        model_cfg.m()
    );
    let (_, train) = load_samples(&train_path)?;
    let validation = match &val_path {
        Some(p) => {
            let (_, v) = load_samples(p)?;
            let (v, dropped) = filter_invalid(v);
            if dropped > 0 {
                println!("validation: dropped {dropped} samples with non-finite values");
            }
            Some(v)
        }
        None => None,
    };
    let mut report = |line: &str| println!("{line}");
    let summary = train_run(&cfg, &model_cfg, train, validation.as_deref(), &out_dir, resume, &mut report)?;
    if summary.dropped > 0 {
        println!("training: dropped {} samples with non-finite values", summary.dropped);
    }
    println!("steps: {}", summary.steps);
    if let Some(m) = &summary.final_metrics {
        println!("final: {m}");
    }
    println!("checkpoint: {}", summary.final_checkpoint.display());
    Ok(EXIT_OK)
}

fn ensemble_from(n: Option<usize>, seed: Option<u64>, file: &RunConfigFile) -> Result<EnsembleConfig> {
    let size = pick(n, file, "ensemble_n")?.unwrap_or(1);
    let seed = pick(seed, file, "seed")?.unwrap_or(0);
    EnsembleConfig::new(size, seed)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let file = RunConfigFile::load_opt(args.config.as_deref())?;
    let ensemble = ensemble_from(args.ensemble_n, args.seed, &file)?;
    let ckpt = require(pick_path(args.checkpoint, &file, "checkpoint"), "checkpoint")?;
    let manifest = require(pick_path(args.manifest, &file, "manifest"), "manifest")?;
    println!("seed: {}", ensemble.seed);
    let model = checkpoint::load(&ckpt)?;
    let (m, samples) = load_samples(&manifest)?;
    if m.labels.is_none() {
        return Err(config_err!("{} lists no label file; eval needs labels", manifest.display()));
    }
    let (samples, dropped) = filter_invalid(samples);
    if dropped > 0 {
        println!("dropped {dropped} samples with non-finite values");
    }
    let metrics = crate::train::evaluate(&model, &samples, &ensemble)?;
    println!("ensemble size: {}", ensemble.size);
    println!("{metrics}");
    print!("confusion (rows = true class):\n{}", metrics.confusion_csv());
    let log = pick_path(args.metrics_log, &file, "metrics_log")
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("eval.log"));
    let line = format!("{} ensemble_n={} seed={}", metrics.log_line(model.step(), 0.0), ensemble.size, ensemble.seed);
    let mut text = fs::read_to_string(&log).unwrap_or_default();
    text.push_str(&line);
    text.push('\n');
    fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
    Ok(EXIT_OK)
}

fn cmd_predict(args: PredictArgs) -> Result<i32> {
    let file = RunConfigFile::load_opt(args.config.as_deref())?;
    let ensemble = ensemble_from(args.ensemble_n, args.seed, &file)?;
    let ckpt = require(pick_path(args.checkpoint, &file, "checkpoint"), "checkpoint")?;
    let manifest = require(pick_path(args.manifest, &file, "manifest"), "manifest")?;
    let out = pick_path(args.out, &file, "out").unwrap_or_else(|| PathBuf::from("predictions.txt"));
    let probs_out = pick_path(args.probs_out, &file, "probs_out");
    println!("seed: {}", ensemble.seed);
    let model = checkpoint::load(&ckpt)?;
    let (_, samples) = load_samples(&manifest)?;
    let (samples, dropped) = filter_invalid(samples);
    if dropped > 0 {
        println!("dropped {dropped} samples with non-finite values");
    }
    let (predictions, metrics) = predict_dataset(&model, &samples, &ensemble, &out, probs_out.as_deref())?;
    println!("predicted {} samples: {}", predictions.len(), out.display());
    if let Some(m) = metrics {
        println!("{m}");
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let file = RunConfigFile::load_opt(args.config.as_deref())?;
    let cfg = model_config(&args.model, &file, "tiny")?;
    let seed = pick(args.seed, &file, "seed")?.unwrap_or(0);
    println!("seed: {seed}");
    let opts = SuiteOptions {
        seed,
        corrupt_backward: args.inject_fault,
        ..Default::default()
    };
    let reports = gradcheck_suite(&cfg, &opts)?;
    let mut ok = true;
    for r in &reports {
        print!("{r}");
        ok &= r.passed();
    }
    if ok {
        println!("all gradient checks passed");
        Ok(EXIT_OK)
    } else {
        for r in &reports {
            for b in r.failing_blocks() {
                println!("failing block: {} / {} (rel. error {:.3e})", r.label, b.name, b.max_rel_error);
            }
        }
        Ok(EXIT_CHECK_FAILED)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Training(_) | Error::Internal(_) => EXIT_RUNTIME,
        _ => EXIT_CONFIG,
    }
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}

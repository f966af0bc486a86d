//! Command-line pipeline: synth, featurize, train, predict, refine,
//! score, dump-activations. Every run writes its resolved configuration
//! next to its primary output so it can be reproduced from that file
//! alone.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wsed::data_io::{
    dir_digest, load_strong_labels, load_weak_labels, synthesize, write_run_manifest, Archetype,
    ClassList, ClassSpec, Manifest, Split, SynthSpec,
};
use wsed::dsp::{featurize, pad_or_truncate, read_features, read_wav, to_mono_16k, FeatureConfig};
use wsed::error::Error;
use wsed::eval::{score, CollarConfig};
use wsed::gcrnn::{Gcrnn, GcrnnConfig};
use wsed::params::{read_checkpoint, write_checkpoint};
use wsed::postproc::{apply, EventList, PostProcParams};
use wsed::salr::{parse_params_tsv, refine, SalrGrid};
use wsed::tensor::Tensor;
use wsed::train::{train, TrainClip, TrainConfig, TrainData};
use wsed::vat::VatConfig;

#[derive(Parser)]
#[command(name = "wsed", version, about = "weakly-labelled sound event detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus.
    Synth(SynthArgs),
    /// Extract log-mel feature caches for every manifest entry.
    Featurize(FeaturizeArgs),
    /// Train a model on the weak and unlabelled splits.
    Train(TrainArgs),
    /// Decode strong event predictions from a checkpoint.
    Predict(PredictArgs),
    /// Select per-class decoding parameters without labels.
    Refine(RefineArgs),
    /// Score estimated events against reference events.
    Score(ScoreArgs),
    /// Dump per-frame classification and attention tracks for one clip.
    DumpActivations(DumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// key=value file with synth.* keys; omitted keys use defaults
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value file with dsp.* keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accepted for interface uniformity; feature extraction is deterministic
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value file; must provide data.* paths
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Disable virtual adversarial training (sets vat.lambda to 0)
    #[arg(long, default_value_t = false)]
    no_vat: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Per-class threshold/width file from refine; defaults to (0.5, 1)
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Manifest split to decode
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory of .feat caches; clips without one are featurized
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accepted for interface uniformity; decoding is deterministic
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Report path; the params file lands next to it
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "weak")]
    split: String,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accepted for interface uniformity; the search is deterministic
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference strong-label TSV
    #[arg(long = "ref")]
    ref_path: PathBuf,
    /// Estimated strong-label TSV
    #[arg(long)]
    est: PathBuf,
    /// Class list file; defaults to the 10 DCASE domestic classes
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Write the per-class table here as TSV in addition to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accepted for interface uniformity; scoring is deterministic
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Audio file to analyse
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for interface uniformity; the forward pass is deterministic
    #[arg(long)]
    seed: Option<u64>,
}

/// Failures sorted by exit code.
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            Error::NonFinite { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

/// Every key a config file may set. Prefix keys (trailing dot) admit an
/// arbitrary suffix.
const KNOWN_KEYS: [&str; 44] = [
    "dsp.window",
    "dsp.overlap",
    "dsp.n_mels",
    "dsp.fmin",
    "dsp.fmax",
    "dsp.log_floor",
    "dsp.target_seconds",
    "model.n_gated_blocks",
    "model.filters",
    "model.kernel_t",
    "model.kernel_f",
    "model.freq_pool",
    "model.rnn_units",
    "vat.epsilon",
    "vat.xi",
    "vat.power_iterations",
    "vat.lambda",
    "train.batch_size",
    "train.labelled_per_batch",
    "train.lr",
    "train.epochs",
    "train.seed",
    "train.literal_eq5",
    "train.val_fraction",
    "train.target_val_f1",
    "salr.thresholds",
    "salr.widths",
    "salr.split",
    "eval.onset_collar",
    "eval.offset_collar",
    "eval.offset_ratio",
    "eval.max_seconds",
    "data.manifest",
    "data.features_dir",
    "data.weak_labels",
    "data.classes",
    "synth.n_weak",
    "synth.n_unlabelled",
    "synth.n_test",
    "synth.events_min",
    "synth.events_max",
    "synth.overlap_allowed",
    "synth.seed",
    "synth.class.",
];
const KNOWN_KEYS_EXTRA: [&str; 5] = [
    "synth.snr_db_min",
    "synth.snr_db_max",
    "synth.noise_rms",
    "synth.clip_seconds",
    "synth.sample_rate",
];

fn key_is_known(key: &str) -> bool {
    KNOWN_KEYS
        .iter()
        .chain(KNOWN_KEYS_EXTRA.iter())
        .any(|k| {
            if let Some(prefix) = k.strip_suffix('.') {
                key.strip_prefix(prefix)
                    .and_then(|rest| rest.strip_prefix('.'))
                    .is_some_and(|suffix| !suffix.is_empty())
            } else {
                key == *k
            }
        })
}

/// key=value settings with the source of each key, for conflict
/// reporting and the resolved-config artifact.
#[derive(Clone, Debug, Default)]
struct RunConfig {
    values: BTreeMap<String, String>,
    sources: BTreeMap<String, String>,
}

impl RunConfig {
    fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| data(format!("{}: {e}", path.display())))?;
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), lineno + 1)))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !key_is_known(&key) {
                return Err(usage(format!(
                    "{}:{}: unknown config key {key}",
                    path.display(),
                    lineno + 1
                )));
            }
            let here = format!("{}:{}", path.display(), lineno + 1);
            if let Some(prev) = config.sources.get(&key) {
                return Err(usage(format!(
                    "config conflict: {key} set at {prev} and at {here}"
                )));
            }
            config.values.insert(key.clone(), value);
            config.sources.insert(key, here);
        }
        Ok(config)
    }

    fn load_opt(path: Option<&PathBuf>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Flags win over the file; the source records the flag name.
    fn set_flag(&mut self, key: &str, value: impl ToString, flag: &str) {
        self.values.insert(key.to_string(), value.to_string());
        self.sources.insert(key.to_string(), format!("flag {flag}"));
    }

    fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn require_path(&self, key: &str) -> CliResult<PathBuf> {
        self.get_str(key)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("config key {key} is required")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| usage(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    fn write_resolved(&self, path: &Path) -> CliResult<()> {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k}={v}").expect("string write");
        }
        fs::write(path, out).map_err(|e| data(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    fn feature_config(&self) -> CliResult<FeatureConfig> {
        let d = FeatureConfig::default();
        Ok(FeatureConfig {
            window: self.parse("dsp.window", d.window)?,
            overlap: self.parse("dsp.overlap", d.overlap)?,
            n_mels: self.parse("dsp.n_mels", d.n_mels)?,
            fmin: self.parse("dsp.fmin", d.fmin)?,
            fmax: self.parse("dsp.fmax", d.fmax)?,
            log_floor: self.parse("dsp.log_floor", d.log_floor)?,
            target_seconds: self.parse("dsp.target_seconds", d.target_seconds)?,
        })
    }

    fn model_config(&self, n_classes: usize, n_mels: usize) -> CliResult<GcrnnConfig> {
        let d = GcrnnConfig::default();
        Ok(GcrnnConfig {
            n_classes,
            n_gated_blocks: self.parse("model.n_gated_blocks", d.n_gated_blocks)?,
            filters: self.parse("model.filters", d.filters)?,
            kernel: (
                self.parse("model.kernel_t", d.kernel.0)?,
                self.parse("model.kernel_f", d.kernel.1)?,
            ),
            freq_pool: self.parse("model.freq_pool", d.freq_pool)?,
            rnn_units: self.parse("model.rnn_units", d.rnn_units)?,
            n_mels,
        })
    }

    fn vat_config(&self) -> CliResult<VatConfig> {
        let d = VatConfig::default();
        Ok(VatConfig {
            epsilon: self.parse("vat.epsilon", d.epsilon)?,
            xi: self.parse("vat.xi", d.xi)?,
            power_iterations: self.parse("vat.power_iterations", d.power_iterations)?,
            lambda: self.parse("vat.lambda", d.lambda)?,
        })
    }

    fn train_config(&self) -> CliResult<TrainConfig> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            batch_size: self.parse("train.batch_size", d.batch_size)?,
            labelled_per_batch: self.parse("train.labelled_per_batch", d.labelled_per_batch)?,
            lr: self.parse("train.lr", d.lr)?,
            epochs: self.parse("train.epochs", d.epochs)?,
            seed: self.parse("train.seed", d.seed)?,
            literal_eq5: self.parse("train.literal_eq5", d.literal_eq5)?,
            val_fraction: self.parse("train.val_fraction", d.val_fraction)?,
            target_val_f1: self.parse_opt("train.target_val_f1")?,
        })
    }

    fn salr_grid(&self) -> CliResult<SalrGrid> {
        let d = SalrGrid::default();
        let thresholds = match self.get_str("salr.thresholds") {
            None => d.thresholds,
            Some(v) => parse_list(v).map_err(|e| usage(format!("salr.thresholds: {e}")))?,
        };
        let widths = match self.get_str("salr.widths") {
            None => d.widths,
            Some(v) => parse_list(v).map_err(|e| usage(format!("salr.widths: {e}")))?,
        };
        Ok(SalrGrid { thresholds, widths })
    }

    fn collar_config(&self) -> CliResult<CollarConfig> {
        let d = CollarConfig::default();
        Ok(CollarConfig {
            onset_collar: self.parse("eval.onset_collar", d.onset_collar)?,
            offset_collar_abs: self.parse("eval.offset_collar", d.offset_collar_abs)?,
            offset_collar_rel: self.parse("eval.offset_ratio", d.offset_collar_rel)?,
        })
    }

    fn synth_spec(&self) -> CliResult<SynthSpec> {
        let mut spec = SynthSpec::default_desk(self.parse("synth.seed", 0u64)?);
        spec.n_weak = self.parse("synth.n_weak", spec.n_weak)?;
        spec.n_unlabelled = self.parse("synth.n_unlabelled", spec.n_unlabelled)?;
        spec.n_test = self.parse("synth.n_test", spec.n_test)?;
        spec.events_min = self.parse("synth.events_min", spec.events_min)?;
        spec.events_max = self.parse("synth.events_max", spec.events_max)?;
        spec.overlap_allowed = self.parse("synth.overlap_allowed", spec.overlap_allowed)?;
        spec.snr_db_min = self.parse("synth.snr_db_min", spec.snr_db_min)?;
        spec.snr_db_max = self.parse("synth.snr_db_max", spec.snr_db_max)?;
        spec.noise_rms = self.parse("synth.noise_rms", spec.noise_rms)?;
        spec.clip_seconds = self.parse("synth.clip_seconds", spec.clip_seconds)?;
        spec.sample_rate = self.parse("synth.sample_rate", spec.sample_rate)?;
        let mut classes = Vec::new();
        for i in 0.. {
            match self.get_str(&format!("synth.class.{i}")) {
                Some(v) => classes.push(parse_class_spec(v).map_err(usage)?),
                None => break,
            }
        }
        if !classes.is_empty() {
            spec.classes = classes;
        }
        Ok(spec)
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("cannot parse {s:?}")))
        .collect()
}

/// Grammar: `name archetype dur_min dur_max` where archetype is
/// tone:FREQ, noise, or am:FREQ:RATE.
fn parse_class_spec(v: &str) -> Result<ClassSpec, String> {
    let fields: Vec<&str> = v.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(format!(
            "class spec {v:?}: expected `name archetype dur_min dur_max`"
        ));
    }
    let arch_fields: Vec<&str> = fields[1].split(':').collect();
    let archetype = match arch_fields.as_slice() {
        ["tone", f] => Archetype::Tone {
            freq: f.parse().map_err(|_| format!("bad tone freq {f:?}"))?,
        },
        ["noise"] => Archetype::NoiseBurst,
        ["am", f, r] => Archetype::AmTone {
            freq: f.parse().map_err(|_| format!("bad am freq {f:?}"))?,
            rate: r.parse().map_err(|_| format!("bad am rate {r:?}"))?,
        },
        _ => return Err(format!("unknown archetype {:?}", fields[1])),
    };
    Ok(ClassSpec {
        name: fields[0].to_string(),
        archetype,
        dur_min: fields[2].parse().map_err(|_| "bad dur_min".to_string())?,
        dur_max: fields[3].parse().map_err(|_| "bad dur_max".to_string())?,
    })
}

fn parse_split(s: &str) -> CliResult<Split> {
    Split::parse(s).ok_or_else(|| {
        usage(format!(
            "unknown split {s:?}; expected weak, unlabelled_in_domain, or test"
        ))
    })
}

fn create_parent_dirs(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
        }
    }
    Ok(())
}

/// Sidecar path: predictions.tsv → predictions.config.
fn sidecar(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

fn featurize_wav(path: &Path, fc: &FeatureConfig) -> CliResult<Tensor<f32>> {
    let clip = read_wav(path)?;
    let mono = to_mono_16k(&clip)?;
    let padded = pad_or_truncate(&mono, fc.target_seconds);
    Ok(featurize(&padded, fc)?.values)
}

/// Cache hit when a .feat file exists, otherwise featurize the audio.
fn clip_features(
    manifest: &Manifest,
    entry: &wsed::data_io::ManifestEntry,
    features_dir: Option<&Path>,
    fc: &FeatureConfig,
) -> CliResult<Tensor<f32>> {
    if let Some(dir) = features_dir {
        let cache = dir.join(format!("{}.feat", entry.clip_id));
        if cache.is_file() {
            let spec = read_features(&cache, fc.hop(), 16_000)?;
            return Ok(spec.values);
        }
    }
    featurize_wav(&manifest.abs_path(entry), fc)
}

/// Model, class names, and feature geometry from a checkpoint and its
/// .meta sidecar.
fn load_model(ckpt: &Path) -> CliResult<(Gcrnn<f32>, ClassList, FeatureConfig)> {
    let meta_path = sidecar(ckpt, "meta");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| data(format!("{}: {e}", meta_path.display())))?;
    let mut pairs = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |key: &str| -> CliResult<usize> {
        pairs
            .get(key)
            .ok_or_else(|| data(format!("{}: missing {key}", meta_path.display())))?
            .parse()
            .map_err(|_| data(format!("{}: bad {key}", meta_path.display())))
    };
    let mut names = Vec::new();
    for i in 0.. {
        match pairs.get(&format!("class.{i}")) {
            Some(name) => names.push(name.clone()),
            None => break,
        }
    }
    let classes = ClassList::from_names(names).map_err(|e| data(e.to_string()))?;
    let config = GcrnnConfig {
        n_classes: get("model.n_classes")?,
        n_gated_blocks: get("model.n_gated_blocks")?,
        filters: get("model.filters")?,
        kernel: (get("model.kernel_t")?, get("model.kernel_f")?),
        freq_pool: get("model.freq_pool")?,
        rnn_units: get("model.rnn_units")?,
        n_mels: get("model.n_mels")?,
    };
    let fc = FeatureConfig {
        window: get("dsp.window")?,
        overlap: get("dsp.overlap")?,
        n_mels: config.n_mels,
        fmin: pairs
            .get("dsp.fmin")
            .and_then(|v| v.parse().ok())
            .unwrap_or(FeatureConfig::default().fmin),
        fmax: pairs
            .get("dsp.fmax")
            .and_then(|v| v.parse().ok())
            .unwrap_or(FeatureConfig::default().fmax),
        log_floor: FeatureConfig::default().log_floor,
        target_seconds: pairs
            .get("dsp.target_seconds")
            .and_then(|v| v.parse().ok())
            .unwrap_or(FeatureConfig::default().target_seconds),
    };
    let params = read_checkpoint(ckpt)?;
    let model = Gcrnn::from_parameters(config, params)?;
    Ok((model, classes, fc))
}

fn write_meta(
    path: &Path,
    model: &Gcrnn<f32>,
    classes: &ClassList,
    fc: &FeatureConfig,
    best_epoch: usize,
    best_val_f1: f64,
) -> CliResult<()> {
    let c = &model.config;
    let mut out = String::new();
    writeln!(out, "model.n_classes={}", c.n_classes).unwrap();
    writeln!(out, "model.n_gated_blocks={}", c.n_gated_blocks).unwrap();
    writeln!(out, "model.filters={}", c.filters).unwrap();
    writeln!(out, "model.kernel_t={}", c.kernel.0).unwrap();
    writeln!(out, "model.kernel_f={}", c.kernel.1).unwrap();
    writeln!(out, "model.freq_pool={}", c.freq_pool).unwrap();
    writeln!(out, "model.rnn_units={}", c.rnn_units).unwrap();
    writeln!(out, "model.n_mels={}", c.n_mels).unwrap();
    writeln!(out, "dsp.window={}", fc.window).unwrap();
    writeln!(out, "dsp.overlap={}", fc.overlap).unwrap();
    writeln!(out, "dsp.fmin={}", fc.fmin).unwrap();
    writeln!(out, "dsp.fmax={}", fc.fmax).unwrap();
    writeln!(out, "dsp.target_seconds={}", fc.target_seconds).unwrap();
    writeln!(out, "best_epoch={best_epoch}").unwrap();
    writeln!(out, "best_val_f1={best_val_f1:.6}").unwrap();
    for (i, name) in classes.names().iter().enumerate() {
        writeln!(out, "class.{i}={name}").unwrap();
    }
    fs::write(path, out).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let mut config = RunConfig::load_opt(args.spec.as_ref())?;
    if let Some(seed) = args.seed {
        config.set_flag("synth.seed", seed, "--seed");
    }
    let spec = config.synth_spec()?;
    fs::create_dir_all(&args.out).map_err(|e| data(format!("{}: {e}", args.out.display())))?;
    let out = synthesize(&spec, &args.out)?;
    config.write_resolved(&args.out.join("resolved.config"))?;
    println!(
        "synthesized {} clips under {}",
        out.n_clips,
        args.out.display()
    );
    Ok(())
}

fn cmd_featurize(args: FeaturizeArgs) -> CliResult<()> {
    if args.seed.is_some() {
        log::info!("--seed has no effect here; feature extraction is deterministic");
    }
    let config = RunConfig::load_opt(args.config.as_ref())?;
    let fc = config.feature_config()?;
    let manifest = Manifest::load(&args.manifest)?;
    fs::create_dir_all(&args.out).map_err(|e| data(format!("{}: {e}", args.out.display())))?;
    for entry in &manifest.entries {
        let features = featurize_wav(&manifest.abs_path(entry), &fc)?;
        let spec = wsed::dsp::LogMelSpectrogram {
            values: features,
            frame_hop: fc.hop(),
            sample_rate: 16_000,
        };
        wsed::dsp::write_features(&args.out.join(format!("{}.feat", entry.clip_id)), &spec)?;
    }
    config.write_resolved(&args.out.join("resolved.config"))?;
    println!(
        "featurized {} clips into {}",
        manifest.entries.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.set_flag("train.seed", seed, "--seed");
    }
    if args.no_vat {
        config.set_flag("vat.lambda", 0.0, "--no-vat");
    }
    let manifest_path = config.require_path("data.manifest")?;
    let weak_path = config.require_path("data.weak_labels")?;
    let classes = match config.get_str("data.classes") {
        Some(p) => ClassList::load(Path::new(p))?,
        None => ClassList::default_dcase(),
    };
    let fc = config.feature_config()?;
    let mc = config.model_config(classes.len(), fc.n_mels)?;
    let vc = config.vat_config()?;
    let tc = config.train_config()?;
    let features_dir = config.get_str("data.features_dir").map(PathBuf::from);

    let manifest = Manifest::load(&manifest_path)?;
    let weak_labels = load_weak_labels(&weak_path, &classes)?;
    for clip_id in weak_labels.keys() {
        if !manifest.entries.iter().any(|e| &e.clip_id == clip_id) {
            return Err(data(format!(
                "label file references {clip_id}, which is not in the manifest"
            )));
        }
    }

    let mut labelled = Vec::new();
    for entry in manifest.split(Split::Weak) {
        let label = weak_labels.get(&entry.clip_id).ok_or_else(|| {
            data(format!("weak-split clip {} has no weak label", entry.clip_id))
        })?;
        labelled.push(TrainClip {
            clip_id: entry.clip_id.clone(),
            features: clip_features(&manifest, entry, features_dir.as_deref(), &fc)?,
            label: Some(label.clone()),
        });
    }
    let mut unlabelled = Vec::new();
    for entry in manifest.split(Split::UnlabelledInDomain) {
        unlabelled.push(TrainClip {
            clip_id: entry.clip_id.clone(),
            features: clip_features(&manifest, entry, features_dir.as_deref(), &fc)?,
            label: None,
        });
    }
    let data_set = TrainData {
        labelled,
        unlabelled,
        validation: vec![],
    };

    fs::create_dir_all(&args.out).map_err(|e| data(format!("{}: {e}", args.out.display())))?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    init_rng.set_stream(10);
    let model = Gcrnn::<f32>::new(mc, &mut init_rng)?;
    let outcome = train(model, &data_set, &tc, &vc)?;

    let mut metrics = String::from("epoch\tce_loss\tvat_loss\tval_weak_f1\n");
    for s in &outcome.log {
        writeln!(
            metrics,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            s.epoch, s.ce, s.vat, s.val_weak_f1
        )
        .unwrap();
    }
    fs::write(args.out.join("metrics.tsv"), metrics)
        .map_err(|e| data(format!("metrics.tsv: {e}")))?;

    let ckpt = args.out.join("checkpoint.ckpt");
    write_checkpoint(&ckpt, &outcome.best_params)?;
    let best_model = Gcrnn::from_parameters(outcome.model.config.clone(), outcome.best_params.clone())?;
    write_meta(
        &args.out.join("checkpoint.meta"),
        &best_model,
        &classes,
        &fc,
        outcome.best_epoch,
        outcome.best_val_f1,
    )?;
    config.write_resolved(&args.out.join("resolved.config"))?;

    let corpus_digest = manifest_path
        .parent()
        .map(dir_digest)
        .transpose()?
        .unwrap_or_default();
    write_run_manifest(
        &args.out.join("run_manifest.txt"),
        &[
            ("command".into(), "train".into()),
            ("crate_version".into(), env!("CARGO_PKG_VERSION").into()),
            ("seed".into(), tc.seed.to_string()),
            ("corpus_digest".into(), corpus_digest),
            ("best_epoch".into(), outcome.best_epoch.to_string()),
            ("best_val_f1".into(), format!("{:.6}", outcome.best_val_f1)),
        ],
    )?;

    if let Some(reason) = outcome.aborted {
        return Err(CliError::Numerical(format!(
            "training aborted: {reason}; best checkpoint up to that point was saved"
        )));
    }
    println!(
        "trained {} epochs, best val weak F1 {:.4} at epoch {}",
        outcome.log.len(),
        outcome.best_val_f1,
        outcome.best_epoch
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CliResult<()> {
    if args.seed.is_some() {
        log::info!("--seed has no effect here; decoding is deterministic");
    }
    let config = RunConfig::load_opt(args.config.as_ref())?;
    let split = parse_split(&args.split)?;
    let (model, classes, fc) = load_model(&args.ckpt)?;
    let manifest = Manifest::load(&args.manifest)?;
    let params_per_class: Vec<PostProcParams> = match &args.params {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| data(format!("{}: {e}", p.display())))?;
            let parsed = parse_params_tsv(&text)?;
            if parsed.len() != classes.len() {
                return Err(data(format!(
                    "params file has {} classes, model has {}",
                    parsed.len(),
                    classes.len()
                )));
            }
            parsed
        }
        None => vec![PostProcParams::default(); classes.len()],
    };

    let mut predictions: BTreeMap<String, EventList> = BTreeMap::new();
    let mut n_clips = 0usize;
    for entry in manifest.split(split) {
        let x = clip_features(&manifest, entry, args.features.as_deref(), &fc)?;
        let (frames, _) = model.forward(&x)?;
        let events = apply(&frames, &params_per_class, &entry.clip_id, fc.hop(), 16_000)?;
        predictions.insert(entry.clip_id.clone(), events);
        n_clips += 1;
    }
    if n_clips == 0 {
        return Err(data(format!("manifest has no {split} clips")));
    }
    create_parent_dirs(&args.out)?;
    wsed::data_io::save_strong_labels(&args.out, &predictions, &classes)?;
    config.write_resolved(&sidecar(&args.out, "config"))?;
    println!("decoded {n_clips} clips into {}", args.out.display());
    Ok(())
}

fn cmd_refine(args: RefineArgs) -> CliResult<()> {
    if args.seed.is_some() {
        log::info!("--seed has no effect here; the parameter search is deterministic");
    }
    let config = RunConfig::load_opt(args.config.as_ref())?;
    let split = parse_split(&args.split)?;
    let (model, _classes, fc) = load_model(&args.ckpt)?;
    let manifest = Manifest::load(&args.manifest)?;
    let grid = config.salr_grid()?;

    let mut clips = Vec::new();
    for entry in manifest.split(split) {
        clips.push((
            entry.clip_id.clone(),
            clip_features(&manifest, entry, args.features.as_deref(), &fc)?,
        ));
    }
    if clips.is_empty() {
        return Err(data(format!("manifest has no {split} clips")));
    }
    let forward = |x: &Tensor<f32>| model.forward(x);
    let report = refine(&forward, &clips, &grid)?;

    create_parent_dirs(&args.out)?;
    fs::write(&args.out, report.to_tsv())
        .map_err(|e| data(format!("{}: {e}", args.out.display())))?;
    let params_path = sidecar(&args.out, "params.tsv");
    fs::write(&params_path, report.params_tsv())
        .map_err(|e| data(format!("{}: {e}", params_path.display())))?;
    config.write_resolved(&sidecar(&args.out, "config"))?;
    for c in &report.choices {
        log::info!(
            "class {}: threshold {:.2}, width {}{}",
            c.class_id,
            c.params.threshold,
            c.params.median_width,
            if c.fallback { " (fallback)" } else { "" }
        );
    }
    println!(
        "refined {} classes on {} clips into {}",
        report.choices.len(),
        clips.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> CliResult<()> {
    if args.seed.is_some() {
        log::info!("--seed has no effect here; scoring is deterministic");
    }
    let config = RunConfig::load_opt(args.config.as_ref())?;
    let classes = match &args.classes {
        Some(p) => ClassList::load(p)?,
        None => ClassList::default_dcase(),
    };
    let collars = config.collar_config()?;
    let max_seconds: f64 = config.parse("eval.max_seconds", 10.0)?;
    let refs = load_strong_labels(&args.ref_path, &classes, max_seconds)?;
    let ests = load_strong_labels(&args.est, &classes, max_seconds)?;
    let ref_lists: Vec<EventList> = refs.into_values().collect();
    let est_lists: Vec<EventList> = ests.into_values().collect();
    let report = score(&ref_lists, &est_lists, &collars, classes.len());
    print!("{report}");
    if let Some(out) = &args.out {
        create_parent_dirs(out)?;
        fs::write(out, report.to_tsv(classes.names()))
            .map_err(|e| data(format!("{}: {e}", out.display())))?;
        config.write_resolved(&sidecar(out, "config"))?;
    }
    Ok(())
}

fn cmd_dump_activations(args: DumpArgs) -> CliResult<()> {
    if args.seed.is_some() {
        log::info!("--seed has no effect here; the forward pass is deterministic");
    }
    let (model, classes, fc) = load_model(&args.ckpt)?;
    let x = featurize_wav(&args.clip, &fc)?;
    let (frames, clip_pred) = model.forward(&x)?;
    let mut out = String::from("frame\ttime_s");
    for name in classes.names() {
        write!(out, "\tcla_{name}").unwrap();
    }
    for name in classes.names() {
        write!(out, "\tatt_{name}").unwrap();
    }
    out.push('\n');
    let hop_s = fc.hop() as f64 / 16_000.0;
    for t in 0..frames.n_frames() {
        write!(out, "{t}\t{:.6}", t as f64 * hop_s).unwrap();
        for c in 0..classes.len() {
            write!(out, "\t{:.6}", frames.z_cla.at2(t, c)).unwrap();
        }
        for c in 0..classes.len() {
            write!(out, "\t{:.6}", frames.z_att.at2(t, c)).unwrap();
        }
        out.push('\n');
    }
    create_parent_dirs(&args.out)?;
    fs::write(&args.out, out).map_err(|e| data(format!("{}: {e}", args.out.display())))?;
    let y: Vec<String> = clip_pred.y.iter().map(|v| format!("{v:.4}")).collect();
    println!("clip probabilities: [{}]", y.join(", "));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Featurize(args) => cmd_featurize(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Score(args) => cmd_score(args),
        Command::DumpActivations(args) => cmd_dump_activations(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

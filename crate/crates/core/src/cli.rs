//! Command-line front end: gradient checks, analytic curves, training,
//! scale sweeps and post-hoc metrics, all writing CSV or JSON.
//!
//! Settings resolve in three layers: built-in defaults, then an optional
//! `key=value` file (`--config`), then explicit flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{self, BlobsConfig, DataError, DataSplits, Dataset};
use crate::loss_heads::{self, HeadConfig, HeadError, HeadGrads, HeadKind, HeadState};
use crate::metrics::{self, AngleStats};
use crate::numerics::{finite_diff_grad, Matrix};
use crate::trainer::{self, AugmentConfig, Checkpoint, MlpConfig, TrainConfig, TrainError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub const DEFAULT_LR: f64 = 0.01;
pub const DATA_ENV: &str = "ANGULAR_EMBED_DATA";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::Config(msg) => CliError::Config(msg),
            TrainError::Data(e) => CliError::Data(e),
            TrainError::Io { path, source } => CliError::Io { path, source },
            e @ (TrainError::Json(_)
            | TrainError::CheckpointVersion { .. }
            | TrainError::Checkpoint(_)) => CliError::Data(DataError::Invalid(e.to_string())),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Fashion,
    Cifar10,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Parser)]
#[command(name = "angular-embed", version, about = "Angular loss heads: gradient checks, curves, training and embedding metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic head gradients with central differences.
    GradCheck(Flags),
    /// Write the dZ/dtheta curves and the closed-form scale trade-off.
    Curves(Flags),
    /// Train one model and write metrics.csv, summary.json and a checkpoint.
    Train(Flags),
    /// Train the angular head once per scale and record intra-class angles.
    SweepS(Flags),
    /// Angle statistics, cosine confusion matrix and histogram for a checkpoint.
    Metrics(Flags),
}

/// Every setting can also be given in the `--config` file as `key=value`,
/// where `key` is the flag name without the leading dashes.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Dataset directory; falls back to $ANGULAR_EMBED_DATA.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<HeadKind>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub m: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on a seeded random subset of this many training samples.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Comma-separated scales for sweep-s.
    #[arg(long)]
    pub s_values: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Features sampled per class for the confusion matrix.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub hist_class: Option<usize>,
    #[arg(long)]
    pub hist_samples: Option<usize>,
    #[arg(long)]
    pub hist_bins: Option<usize>,
    /// Require embed2d.csv (the embedding must be two-dimensional).
    #[arg(long)]
    pub embed2d: bool,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub theta_points: Option<usize>,
    #[arg(long)]
    pub s_points: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub head: HeadKind,
    pub s: f64,
    pub m: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` selects [`DEFAULT_LR`].
    pub lr_max: Option<f64>,
    pub weight_decay: f64,
    pub metric_interval: usize,
    pub probe_size: usize,
    pub augment: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub subset: Option<usize>,
    pub s_values: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub split: SplitArg,
    pub per_class: usize,
    pub hist_class: usize,
    pub hist_samples: usize,
    pub hist_bins: usize,
    pub embed2d: bool,
    pub instances: usize,
    pub tolerance: f64,
    pub theta_points: usize,
    pub s_points: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub classes: usize,
    pub blobs: BlobsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Fashion,
            data_dir: None,
            head: HeadKind::Angular,
            s: 7.0,
            m: 0.5,
            lambda: 0.01,
            alpha: 0.5,
            embed_dim: 64,
            hidden: vec![256, 128],
            epochs: 20,
            batch_size: 256,
            lr_max: None,
            weight_decay: 5e-4,
            metric_interval: 200,
            probe_size: 2000,
            augment: false,
            seed: 0,
            out: PathBuf::from("out"),
            subset: None,
            s_values: vec![1.0, 3.0, 5.0, 7.0, 12.0, 20.0],
            checkpoint: None,
            split: SplitArg::Test,
            per_class: 10,
            hist_class: 0,
            hist_samples: 200,
            hist_bins: 36,
            embed2d: false,
            instances: 20,
            tolerance: 1e-4,
            theta_points: 200,
            s_points: 100,
            s_min: 0.5,
            s_max: 20.0,
            classes: 10,
            blobs: BlobsConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        other => Err(CliError::Config(format!("cannot parse `{other}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Peak learning rate, falling back to [`DEFAULT_LR`].
    pub fn lr(&self) -> f64 {
        self.lr_max.unwrap_or(DEFAULT_LR)
    }

    /// Sets one option from its textual form; keys match the flag names and
    /// may use `_` or `-`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('_', "-");
        let v = value.trim();
        match key.as_str() {
            "dataset" => {
                self.dataset = DatasetKind::from_str(v, true)
                    .map_err(|_| CliError::Config(format!("unknown dataset `{v}`")))?
            }
            "data-dir" => self.data_dir = Some(PathBuf::from(v)),
            "head" => {
                self.head = v
                    .parse()
                    .map_err(|e: HeadError| CliError::Config(e.to_string()))?
            }
            "s" => self.s = parse(&key, v)?,
            "m" => self.m = parse(&key, v)?,
            "lambda" => self.lambda = parse(&key, v)?,
            "alpha" => self.alpha = parse(&key, v)?,
            "embed-dim" => self.embed_dim = parse(&key, v)?,
            "hidden" => self.hidden = parse_list(&key, v)?,
            "epochs" => self.epochs = parse(&key, v)?,
            "batch-size" => self.batch_size = parse(&key, v)?,
            "lr-max" => self.lr_max = Some(parse(&key, v)?),
            "weight-decay" => self.weight_decay = parse(&key, v)?,
            "metric-interval" => self.metric_interval = parse(&key, v)?,
            "probe-size" => self.probe_size = parse(&key, v)?,
            "augment" => self.augment = parse_bool(&key, v)?,
            "seed" => self.seed = parse(&key, v)?,
            "out" => self.out = PathBuf::from(v),
            "subset" => self.subset = Some(parse(&key, v)?),
            "s-values" => self.s_values = parse_list(&key, v)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "split" => {
                self.split = SplitArg::from_str(v, true)
                    .map_err(|_| CliError::Config(format!("unknown split `{v}`")))?
            }
            "per-class" => self.per_class = parse(&key, v)?,
            "hist-class" => self.hist_class = parse(&key, v)?,
            "hist-samples" => self.hist_samples = parse(&key, v)?,
            "hist-bins" => self.hist_bins = parse(&key, v)?,
            "embed2d" => self.embed2d = parse_bool(&key, v)?,
            "instances" => self.instances = parse(&key, v)?,
            "tolerance" => self.tolerance = parse(&key, v)?,
            "theta-points" => self.theta_points = parse(&key, v)?,
            "s-points" => self.s_points = parse(&key, v)?,
            "s-min" => self.s_min = parse(&key, v)?,
            "s-max" => self.s_max = parse(&key, v)?,
            "classes" => self.classes = parse(&key, v)?,
            "blobs-classes" => self.blobs.num_classes = parse(&key, v)?,
            "blobs-per-class" => self.blobs.per_class = parse(&key, v)?,
            "blobs-dim" => self.blobs.dim = parse(&key, v)?,
            "blobs-scale" => self.blobs.center_scale = parse(&key, v)?,
            "blobs-sigma" => self.blobs.noise_sigma = parse(&key, v)?,
            _ => return Err(CliError::Config(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            self.apply(key, value)?;
        }
        Ok(())
    }

    fn apply_flags(&mut self, f: &Flags) -> Result<(), CliError> {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &f.$field {
                    self.$field = v.clone();
                }
            )*};
        }
        set!(dataset, head, s, m, lambda, alpha, embed_dim, epochs, batch_size, weight_decay, seed, out, split, per_class, hist_class, hist_samples, hist_bins, instances, tolerance, theta_points, s_points, classes);
        if let Some(v) = &f.data_dir {
            self.data_dir = Some(v.clone());
        }
        if let Some(v) = f.lr_max {
            self.lr_max = Some(v);
        }
        if let Some(v) = f.subset {
            self.subset = Some(v);
        }
        if let Some(v) = &f.checkpoint {
            self.checkpoint = Some(v.clone());
        }
        if let Some(v) = &f.hidden {
            self.hidden = parse_list("hidden", v)?;
        }
        if let Some(v) = &f.s_values {
            self.s_values = parse_list("s-values", v)?;
        }
        if f.embed2d {
            self.embed2d = true;
        }
        Ok(())
    }

    /// Defaults, then the `--config` file, then the flags themselves.
    pub fn resolve(flags: &Flags) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = &flags.config {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            cfg.apply_file_text(&text)?;
        }
        cfg.apply_flags(flags)?;
        cfg.blobs.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn head_config(&self) -> Result<HeadConfig, CliError> {
        let mut h = HeadConfig::new(self.head);
        match self.head {
            HeadKind::Softmax | HeadKind::CenterSoftmax => {}
            _ => h.s = self.s,
        }
        h.m = self.m;
        h.lambda = self.lambda;
        h.alpha = self.alpha;
        h.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(h)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr(),
            weight_decay: self.weight_decay,
            metric_interval_iters: self.metric_interval,
            shuffle_seed: self.seed,
            probe_size: self.probe_size,
            histogram_class: self.hist_class,
            histogram_samples: self.hist_samples,
            histogram_bins: self.hist_bins,
            augment: self.augment.then_some(AugmentConfig { pad: 4, flip_p: 0.5 }),
            ..TrainConfig::default()
        }
    }

    pub fn mlp_config(&self, input_dim: usize) -> MlpConfig {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embed_dim);
        MlpConfig::new(dims, self.seed)
    }

    /// Directory holding the dataset files. A directory that contains the
    /// conventional sub-folder (`fashion-mnist`, `cifar-10-batches-bin`) is
    /// descended into.
    pub fn dataset_dir(&self) -> Result<PathBuf, CliError> {
        let root = match &self.data_dir {
            Some(dir) => dir.clone(),
            None => std::env::var_os(DATA_ENV).map(PathBuf::from).ok_or_else(|| {
                CliError::Config(format!("no --data-dir given and {DATA_ENV} is not set"))
            })?,
        };
        let sub = match self.dataset {
            DatasetKind::Fashion => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Blobs => return Ok(root),
        };
        let nested = root.join(sub);
        Ok(if nested.is_dir() { nested } else { root })
    }

    pub fn load_data(&self) -> Result<DataSplits, CliError> {
        let mut splits = match self.dataset {
            DatasetKind::Fashion => data::load_fashion_mnist(&self.dataset_dir()?)?,
            DatasetKind::Cifar10 => data::load_cifar10(&self.dataset_dir()?)?,
            DatasetKind::Blobs => data::synth_blobs(&self.blobs)?,
        };
        if let Some(n) = self.subset {
            splits.train = splits.train.subset(n, self.seed);
        }
        Ok(splits)
    }
}


fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Gradient-check outcome for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCheck {
    pub head: HeadKind,
    pub instances: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 0.1)`;
    /// passing at tolerance `t` means every entry is within `t` relative or
    /// `0.1 t` absolute.
    pub max_err: f64,
    pub worst_seed: u64,
    pub worst_entry: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub heads: Vec<HeadCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.heads.iter().all(|h| h.passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<8} {:>9} {:>12} {:>20} {:<28} status\n",
            "head", "instances", "max_err", "worst_seed", "worst_entry"
        );
        for h in &self.heads {
            let _ = writeln!(
                out,
                "{:<8} {:>9} {:>12.3e} {:>20} {:<28} {}",
                h.head.name(),
                h.instances,
                h.max_err,
                h.worst_seed,
                h.worst_entry,
                if h.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            out,
            "tolerance {:e}: {}",
            self.tolerance,
            if self.passed() { "all heads pass" } else { "FAILED" }
        );
        out
    }
}

/// Head configuration used by the gradient check.
pub fn grad_check_head(kind: HeadKind) -> HeadConfig {
    match kind {
        HeadKind::Softmax => HeadConfig::softmax(),
        HeadKind::NormSoftmax => HeadConfig::norm_softmax(3.0),
        HeadKind::ArcFace => HeadConfig::arcface(3.0, 0.5),
        HeadKind::Angular => HeadConfig::angular(3.0),
        HeadKind::CenterSoftmax => HeadConfig::center(0.3, 0.5),
    }
}

/// Random instance with `N <= 8`, `C <= 5`, `d <= 6` and every `|cos| <= 0.99`.
pub fn grad_check_instance(
    kind: HeadKind,
    seed: u64,
) -> (HeadState, Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = grad_check_head(kind);
    loop {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=5);
        let d = rng.random_range(2..=6);
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let w = Matrix::from_fn(c, d, |_, _| rng.random_range(-1.0..1.0));
        let centers = (kind == HeadKind::CenterSoftmax)
            .then(|| Matrix::from_fn(c, d, |_, _| rng.random_range(-1.0..1.0)));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let state = HeadState::new(kind, w, centers).expect("consistent shapes");
        let cache = loss_heads::forward(&cfg, &state, &x, &labels).expect("valid instance");
        let norms_ok = cache.x_norms.iter().chain(&cache.w_norms).all(|&r| r > 0.1);
        if norms_ok && cache.cosines.as_slice().iter().all(|c| c.abs() <= 0.99) {
            return (state, x, labels);
        }
    }
}

/// Hook applied to the analytic gradients before comparison; lets tests
/// plant a deliberate bug.
pub type GradMutation<'a> = &'a dyn Fn(HeadKind, &mut HeadGrads);

pub fn grad_check(
    seed: u64,
    instances: usize,
    tolerance: f64,
    mutation: Option<GradMutation<'_>>,
) -> GradCheckReport {
    let h = 1e-5;
    let heads = HeadKind::ALL
        .iter()
        .map(|&kind| {
            let cfg = grad_check_head(kind);
            let mut check = HeadCheck {
                head: kind,
                instances,
                max_err: 0.0,
                worst_seed: 0,
                worst_entry: "-".into(),
                passed: true,
            };
            for k in 0..instances {
                let inst_seed = seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(kind as u64 * 10_007 + k as u64);
                let (state, x, labels) = grad_check_instance(kind, inst_seed);
                let cache = loss_heads::forward(&cfg, &state, &x, &labels).expect("valid instance");
                let mut grads = loss_heads::backward(&cache, &cfg, &state).expect("valid instance");
                if let Some(mutate) = mutation {
                    mutate(kind, &mut grads);
                }
                let fx = |v: &Matrix| loss_heads::head_loss(&cfg, &state, v, &labels).unwrap();
                let fw = |v: &Matrix| {
                    let st = HeadState {
                        weights: v.clone(),
                        centers: state.centers.clone(),
                    };
                    loss_heads::head_loss(&cfg, &st, &x, &labels).unwrap()
                };
                let mut pairs = vec![
                    ("dx", grads.dx.clone(), finite_diff_grad(fx, &x, h).unwrap()),
                    ("dw", grads.dw.clone(), finite_diff_grad(fw, &state.weights, h).unwrap()),
                ];
                if let (Some(dc), Some(centers)) = (&grads.dcenters, &state.centers) {
                    let fc = |v: &Matrix| {
                        let st = HeadState {
                            weights: state.weights.clone(),
                            centers: Some(v.clone()),
                        };
                        loss_heads::head_loss(&cfg, &st, &x, &labels).unwrap()
                    };
                    pairs.push(("dcenters", dc.clone(), finite_diff_grad(fc, centers, h).unwrap()));
                }
                for (name, analytic, numeric) in pairs {
                    for r in 0..analytic.rows() {
                        for c in 0..analytic.cols() {
                            let (a, n) = (analytic[(r, c)], numeric[(r, c)]);
                            let err = (a - n).abs() / a.abs().max(n.abs()).max(0.1);
                            let err = if err.is_nan() { f64::INFINITY } else { err };
                            if err > check.max_err {
                                check.max_err = err;
                                check.worst_seed = inst_seed;
                                check.worst_entry = format!("{name}[{r},{c}] {a:.3e}/{n:.3e}");
                            }
                        }
                    }
                }
            }
            check.passed = check.max_err <= tolerance;
            check
        })
        .collect();
    GradCheckReport { heads, tolerance }
}

pub fn cmd_grad_check(cfg: &RunConfig) -> Result<String, CliError> {
    let report = grad_check(cfg.seed, cfg.instances, cfg.tolerance, None);
    let text = report.render();
    if report.passed() {
        Ok(text)
    } else {
        let failed: Vec<&str> = report
            .heads
            .iter()
            .filter(|h| !h.passed)
            .map(|h| h.head.name())
            .collect();
        Err(CliError::Numeric(format!(
            "gradient check failed for {}\n{text}",
            failed.join(", ")
        )))
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Writes `gradient_curves.csv`, `loss_grad_vs_s.csv` and `log_ratio_vs_s.csv`.
pub fn cmd_curves(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    if cfg.classes < 2 {
        return Err(CliError::Config("curves need at least two classes".into()));
    }
    ensure_dir(&cfg.out)?;
    let pi = std::f64::consts::PI;
    let thetas = linspace(0.01, pi - 0.01, cfg.theta_points);
    let mut curves = String::from("theta,head,dzdtheta\n");
    for kind in [
        HeadKind::Softmax,
        HeadKind::NormSoftmax,
        HeadKind::ArcFace,
        HeadKind::Angular,
    ] {
        let mut head = HeadConfig::new(kind);
        if kind != HeadKind::Softmax {
            head.s = cfg.s;
        }
        head.m = cfg.m;
        let values = loss_heads::angular_gradient_curve(&head, &thetas)
            .map_err(|e| CliError::Config(e.to_string()))?;
        for (t, v) in thetas.iter().zip(values) {
            let _ = writeln!(curves, "{t},{},{v}", kind.name());
        }
    }
    let scales = linspace(cfg.s_min, cfg.s_max, cfg.s_points);
    let mut grads = String::from("s,g_target,g_other\n");
    let mut ratio = String::from("s,log_ratio\n");
    for &s in &scales {
        let g = loss_heads::loss_angle_gradient_closed_form(s, cfg.classes);
        let _ = writeln!(grads, "{s},{},{}", g.g_target, g.g_other);
        let _ = writeln!(ratio, "{s},{}", loss_heads::prob_log_ratio(s));
    }
    let files = [
        ("gradient_curves.csv", curves),
        ("loss_grad_vs_s.csv", grads),
        ("log_ratio_vs_s.csv", ratio),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let path = cfg.out.join(name);
        write(&path, &body)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub status: String,
    pub error: Option<String>,
    pub dataset: DatasetKind,
    pub head: HeadKind,
    pub s: f64,
    pub m: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub layer_dims: Vec<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub iterations: Option<usize>,
    pub test_accuracy: Option<f64>,
    pub test_error_rate: Option<f64>,
    pub angle_stats: Option<AngleStats<f64>>,
    pub per_class_accuracy: Option<Vec<f64>>,
    pub wall_seconds: f64,
}

pub fn metrics_csv(records: &[trainer::LogRecord]) -> String {
    let mut out = String::from("iteration,epoch,lr,train_loss,wc_intra,w_inter,c_inter,train_acc\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration, r.epoch, r.lr, r.train_loss, r.wc_intra, r.w_inter, r.c_inter, r.train_acc
        );
    }
    out
}

pub fn histogram_csv(histograms: &[metrics::AngleHistogram]) -> String {
    let mut out = String::from("epoch,class_id,bin_lo,bin_hi,count\n");
    for h in histograms {
        for (k, count) in h.counts.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                h.epoch,
                h.class_id,
                h.bin_edges[k],
                h.bin_edges[k + 1],
                count
            );
        }
    }
    out
}

/// Outcome of [`cmd_train`]; the summary is written even when training diverges.
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub checkpoint: Option<Checkpoint>,
    pub log: Option<trainer::TrainLog>,
}

/// Trains on already-loaded data and writes `metrics.csv`, `histogram.csv`,
/// `summary.json` and `checkpoint.json` into `cfg.out`.
pub fn train_and_write(cfg: &RunConfig, data: &DataSplits) -> Result<TrainOutcome, CliError> {
    let head = cfg.head_config()?;
    let mlp = cfg.mlp_config(data.train.dim());
    let tc = cfg.train_config();
    ensure_dir(&cfg.out)?;
    let start = Instant::now();
    let result = trainer::train(&mlp, &head, data, &tc);
    let wall_seconds = start.elapsed().as_secs_f64();
    let mut summary = TrainSummary {
        status: "ok".into(),
        error: None,
        dataset: cfg.dataset,
        head: cfg.head,
        s: head.s,
        m: head.m,
        lambda: head.lambda,
        alpha: head.alpha,
        seed: cfg.seed,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr_max: tc.lr_max,
        layer_dims: mlp.layer_dims.clone(),
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        iterations: None,
        test_accuracy: None,
        test_error_rate: None,
        angle_stats: None,
        per_class_accuracy: None,
        wall_seconds,
    };
    match result {
        Ok((ckpt, log)) => {
            summary.iterations = Some(ckpt.iteration);
            summary.test_accuracy = Some(log.final_eval.accuracy);
            summary.test_error_rate = Some(log.final_eval.error_rate);
            summary.angle_stats = Some(log.final_eval.angle_stats);
            summary.per_class_accuracy = Some(log.final_eval.per_class_accuracy.clone());
            write(&cfg.out.join("metrics.csv"), &metrics_csv(&log.records))?;
            write(&cfg.out.join("histogram.csv"), &histogram_csv(&log.histograms))?;
            write(&cfg.out.join("summary.json"), &to_json(&summary))?;
            ckpt.save(&cfg.out.join("checkpoint.json"))?;
            Ok(TrainOutcome {
                summary,
                checkpoint: Some(ckpt),
                log: Some(log),
            })
        }
        Err(err @ TrainError::Diverged { iteration, .. }) => {
            summary.status = "diverged".into();
            summary.iterations = Some(iteration);
            summary.error = Some(err.to_string());
            write(&cfg.out.join("summary.json"), &to_json(&summary))?;
            Ok(TrainOutcome {
                summary,
                checkpoint: None,
                log: None,
            })
        }
        Err(other) => Err(other.into()),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let data = cfg.load_data()?;
    let outcome = train_and_write(cfg, &data)?;
    let s = &outcome.summary;
    match (&s.error, s.test_error_rate) {
        (Some(err), _) => Err(CliError::Numeric(err.clone())),
        (None, Some(rate)) => Ok(format!(
            "{} head: test error {:.2}% after {} iterations; wrote {}\n",
            cfg.head,
            100.0 * rate,
            s.iterations.unwrap_or(0),
            cfg.out.display()
        )),
        (None, None) => unreachable!("successful runs carry an error rate"),
    }
}

#[derive(Debug, Clone, Serialize)]
struct SweepRun {
    s: f64,
    status: String,
    error: Option<String>,
    final_wc_intra: Option<f64>,
    test_wc_intra: Option<f64>,
    test_error_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct SweepSummary {
    dataset: DatasetKind,
    train_samples: usize,
    subset: Option<usize>,
    seed: u64,
    epochs: usize,
    lr_max: f64,
    layer_dims: Vec<usize>,
    runs: Vec<SweepRun>,
}

/// One angular run per scale on the same data and seed.
///
/// `sweep.csv` columns: `s,iteration,wc_intra,row,status`, where `row` is
/// `interval` for logged training points and `final` for the test-set value
/// appended after each run.
pub fn cmd_sweep_s(cfg: &RunConfig) -> Result<String, CliError> {
    if cfg.s_values.is_empty() {
        return Err(CliError::Config("s-values is empty".into()));
    }
    let mut cfg = cfg.clone();
    cfg.head = HeadKind::Angular;
    if cfg.subset.is_none() && cfg.dataset != DatasetKind::Blobs {
        cfg.subset = Some(10_000);
    }
    let data = cfg.load_data()?;
    let mlp = cfg.mlp_config(data.train.dim());
    let tc = cfg.train_config();
    ensure_dir(&cfg.out)?;
    let mut csv = String::from("s,iteration,wc_intra,row,status\n");
    let mut runs = Vec::new();
    for &s in &cfg.s_values {
        let head = HeadConfig::angular(s);
        head.validate().map_err(|e| CliError::Config(e.to_string()))?;
        match trainer::train(&mlp, &head, &data, &tc) {
            Ok((ckpt, log)) => {
                for r in &log.records {
                    let _ = writeln!(csv, "{s},{},{},interval,ok", r.iteration, r.wc_intra);
                }
                let test_wc = log.final_eval.angle_stats.wc_intra;
                let _ = writeln!(csv, "{s},{},{test_wc},final,ok", ckpt.iteration);
                runs.push(SweepRun {
                    s,
                    status: "ok".into(),
                    error: None,
                    final_wc_intra: log.records.last().map(|r| r.wc_intra),
                    test_wc_intra: Some(test_wc),
                    test_error_rate: Some(log.final_eval.error_rate),
                });
            }
            Err(err @ TrainError::Diverged { iteration, .. }) => {
                let _ = writeln!(csv, "{s},{iteration},,final,diverged");
                runs.push(SweepRun {
                    s,
                    status: "diverged".into(),
                    error: Some(err.to_string()),
                    final_wc_intra: None,
                    test_wc_intra: None,
                    test_error_rate: None,
                });
            }
            Err(other) => return Err(other.into()),
        }
    }
    write(&cfg.out.join("sweep.csv"), &csv)?;
    let summary = SweepSummary {
        dataset: cfg.dataset,
        train_samples: data.train.len(),
        subset: cfg.subset,
        seed: cfg.seed,
        epochs: cfg.epochs,
        lr_max: tc.lr_max,
        layer_dims: mlp.layer_dims.clone(),
        runs,
    };
    write(&cfg.out.join("sweep_summary.json"), &to_json(&summary))?;
    let mut text = String::from("s        final_wc_intra  status\n");
    for r in &summary.runs {
        let _ = writeln!(
            text,
            "{:<8} {:<15} {}",
            r.s,
            r.final_wc_intra.map_or("-".into(), |v| format!("{v:.6}")),
            r.status
        );
    }
    Ok(text)
}

fn split_of(data: DataSplits, split: SplitArg) -> Dataset {
    match split {
        SplitArg::Train => data.train,
        SplitArg::Test => data.test,
    }
}

/// Writes `angle_stats.json`, `confusion.csv`, `histogram.csv` and, for a
/// two-dimensional embedding, `embed2d.csv`.
///
/// `confusion.csv` has one row per sampled feature: `sample,label` followed by
/// its cosine similarity with every sampled feature (`c0..cK-1`).
pub fn cmd_metrics(cfg: &RunConfig) -> Result<String, CliError> {
    let path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("checkpoint.json"));
    let ckpt = Checkpoint::load(&path)?;
    let d = ckpt.mlp_config.embed_dim();
    if cfg.embed2d && d != 2 {
        return Err(CliError::Config(format!(
            "embed2d.csv needs a 2-dimensional embedding, checkpoint has d={d}"
        )));
    }
    let data = split_of(cfg.load_data()?, cfg.split);
    if data.dim() != ckpt.mlp_config.input_dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} input features, dataset has {}",
            ckpt.mlp_config.input_dim(),
            data.dim()
        )));
    }
    let emb = ckpt.embed(&data.features)?;
    let classes = ckpt.num_classes();
    let centers = metrics::class_centers(&emb, &data.labels, classes)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let stats = metrics::angle_stats(&ckpt.head.weights, &centers)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    ensure_dir(&cfg.out)?;
    write(&cfg.out.join("angle_stats.json"), &to_json(&stats))?;

    let cm = metrics::sampled_confusion(&emb, &data.labels, classes, cfg.per_class, cfg.seed)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let k = cm.sample_ids.len();
    let mut csv = String::from("sample,label");
    for j in 0..k {
        let _ = write!(csv, ",c{j}");
    }
    csv.push('\n');
    for (i, &id) in cm.sample_ids.iter().enumerate() {
        let _ = write!(csv, "{id},{}", data.labels[id]);
        for j in 0..k {
            let _ = write!(csv, ",{}", cm.entries[(i, j)]);
        }
        csv.push('\n');
    }
    write(&cfg.out.join("confusion.csv"), &csv)?;

    let hist = metrics::angle_histogram(
        &emb,
        &data.labels,
        &ckpt.head.weights,
        cfg.hist_class,
        cfg.hist_samples,
        cfg.hist_bins,
        cfg.seed,
        ckpt.train_config.epochs,
    )
    .map_err(|e| CliError::Numeric(e.to_string()))?;
    write(&cfg.out.join("histogram.csv"), &histogram_csv(&[hist]))?;

    if d == 2 {
        let mut csv = String::from("x,y,label\n");
        for (row, &y) in emb.iter_rows().zip(&data.labels) {
            let _ = writeln!(csv, "{},{},{y}", row[0], row[1]);
        }
        write(&cfg.out.join("embed2d.csv"), &csv)?;
    }
    let labels: Vec<usize> = cm.sample_ids.iter().map(|&i| data.labels[i]).collect();
    Ok(format!(
        "wc_intra {:.6}  w_inter {:.6}  c_inter {:.6}  mean |inter-class cosine| {:.6}\n",
        stats.wc_intra,
        stats.w_inter,
        stats.c_inter,
        cm.mean_abs_inter_class(&labels)
    ))
}

/// Parses arguments, runs the subcommand and maps failures to exit codes.
pub fn run<I, A>(args: I) -> ExitCode
where
    I: IntoIterator<Item = A>,
    A: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    match execute(&cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::from(EXIT_OK)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

pub fn execute(command: &Command) -> Result<String, CliError> {
    match command {
        Command::GradCheck(f) => cmd_grad_check(&RunConfig::resolve(f)?),
        Command::Curves(f) => {
            let paths = cmd_curves(&RunConfig::resolve(f)?)?;
            Ok(paths
                .iter()
                .map(|p| format!("wrote {}\n", p.display()))
                .collect())
        }
        Command::Train(f) => cmd_train(&RunConfig::resolve(f)?),
        Command::SweepS(f) => cmd_sweep_s(&RunConfig::resolve(f)?),
        Command::Metrics(f) => cmd_metrics(&RunConfig::resolve(f)?),
    }
}

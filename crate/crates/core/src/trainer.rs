//! MLP backbone, Adam, the one-cycle schedule and the training loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment_batch, DataError, DataSplits, Dataset};
use crate::loss_heads::{self, HeadConfig, HeadError, HeadKind, HeadState};
use crate::metrics::{self, AngleHistogram, AngleStats, MetricsError};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix, NumericsError};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 1024;
const PROBE_SALT: u64 = 0x5052_4f42;
const AUGMENT_SALT: u64 = 0x4155_4754;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration} (epoch {epoch}): loss {loss}; last good iteration {last_good_iteration}")]
    Diverged {
        iteration: usize,
        epoch: usize,
        last_good_iteration: usize,
        loss: f64,
    },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("inconsistent checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpConfig {
    pub fn new(layer_dims: Vec<usize>, init_seed: u64) -> Self {
        Self {
            layer_dims,
            activation: Activation::Relu,
            init_seed,
        }
    }

    /// `input -> 256 -> 128 -> embed_dim`.
    pub fn standard(input_dim: usize, embed_dim: usize, init_seed: u64) -> Self {
        Self::new(vec![input_dim, 256, 128, embed_dim], init_seed)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(TrainError::Config(format!(
                "layer_dims must list at least two positive sizes, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }
}

/// Affine layer `y = x * weight + bias` with `weight` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f64> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f64> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// He-normal weights, zero biases.
    pub fn init(cfg: &MlpConfig) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        Self::init_with(cfg, &mut rng)
    }

    fn init_with(cfg: &MlpConfig, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        cfg.validate()?;
        let layers = cfg
            .layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Dense {
                    weight: Matrix::from_fn(fan_in, fan_out, |_, _| T::lit(dist.sample(rng))),
                    bias: vec![T::zero(); fan_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    fn check(&self, cfg: &MlpConfig) -> Result<(), TrainError> {
        let ok = self.layers.len() + 1 == cfg.layer_dims.len()
            && self.layers.iter().zip(cfg.layer_dims.windows(2)).all(|(l, w)| {
                l.weight.shape() == (w[0], w[1]) && l.bias.len() == w[1]
            });
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "parameters do not match layer_dims {:?}",
                cfg.layer_dims
            )))
        }
    }
}

/// Inputs seen by each layer during [`mlp_forward`].
#[derive(Debug, Clone)]
pub struct MlpCache<T = f64> {
    pub inputs: Vec<Matrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T = f64> {
    pub layers: Vec<Dense<T>>,
    /// Gradient with respect to the batch, when requested.
    pub input: Option<Matrix<T>>,
}

fn affine<T: Scalar>(x: &Matrix<T>, layer: &Dense<T>) -> Result<Matrix<T>, NumericsError> {
    let mut out = matmul(x, &layer.weight)?;
    for i in 0..out.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(out)
}

fn relu_in_place<T: Scalar>(m: &mut Matrix<T>) {
    m.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = v.max(T::zero()));
}

fn check_batch<T: Scalar>(cfg: &MlpConfig, batch: &Matrix<T>) -> Result<(), TrainError> {
    if batch.cols() != cfg.input_dim() {
        return Err(NumericsError::ShapeMismatch {
            op: "mlp_forward",
            left: batch.shape(),
            right: (cfg.input_dim(), cfg.embed_dim()),
        }
        .into());
    }
    Ok(())
}

/// Affine + ReLU for every hidden layer, affine only for the last.
pub fn mlp_forward<T: Scalar>(
    cfg: &MlpConfig,
    mlp: &Mlp<T>,
    batch: &Matrix<T>,
) -> Result<(Matrix<T>, MlpCache<T>), TrainError> {
    check_batch(cfg, batch)?;
    mlp.check(cfg)?;
    let mut inputs = Vec::with_capacity(mlp.layers.len());
    let mut h = batch.clone();
    let last = mlp.layers.len() - 1;
    for (l, layer) in mlp.layers.iter().enumerate() {
        let mut out = affine(&h, layer)?;
        if l < last {
            relu_in_place(&mut out);
        }
        inputs.push(std::mem::replace(&mut h, out));
    }
    Ok((h, MlpCache { inputs }))
}

/// Embeddings for a whole feature matrix, computed in fixed-size chunks.
pub fn embed<T: Scalar>(cfg: &MlpConfig, mlp: &Mlp<T>, x: &Matrix<T>) -> Result<Matrix<T>, TrainError> {
    check_batch(cfg, x)?;
    mlp.check(cfg)?;
    let mut out = Matrix::zeros(x.rows(), cfg.embed_dim());
    let last = mlp.layers.len() - 1;
    let mut start = 0;
    while start < x.rows() {
        let end = (start + EVAL_CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let mut h = x.select_rows(&idx);
        for (l, layer) in mlp.layers.iter().enumerate() {
            h = affine(&h, layer)?;
            if l < last {
                relu_in_place(&mut h);
            }
        }
        out.as_mut_slice()[start * cfg.embed_dim()..end * cfg.embed_dim()]
            .copy_from_slice(h.as_slice());
        start = end;
    }
    Ok(out)
}

pub fn mlp_backward<T: Scalar>(
    mlp: &Mlp<T>,
    cache: &MlpCache<T>,
    d_out: &Matrix<T>,
    want_input: bool,
) -> Result<MlpGrads<T>, TrainError> {
    let mut d = d_out.clone();
    let mut layers = Vec::with_capacity(mlp.layers.len());
    let mut input = None;
    for (l, layer) in mlp.layers.iter().enumerate().rev() {
        let x = &cache.inputs[l];
        let weight = matmul_tn(x, &d)?;
        let mut bias = vec![T::zero(); d.cols()];
        for row in d.iter_rows() {
            for (b, &g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        layers.push(Dense { weight, bias });
        if l > 0 {
            let mut prev = matmul_nt(&d, &layer.weight)?;
            // x is the ReLU output of the previous layer
            for (g, &a) in prev.as_mut_slice().iter_mut().zip(x.as_slice()) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
            d = prev;
        } else if want_input {
            input = Some(matmul_nt(&d, &layer.weight)?);
        }
    }
    layers.reverse();
    Ok(MlpGrads { layers, input })
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T = f64> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One Adam step (`t >= 1`) preceded by decoupled weight decay
/// `p <- p - lr * weight_decay * p`.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    moments: &mut Moments<T>,
    t: usize,
    lr: f64,
    cfg: &TrainConfig,
) {
    assert!(t >= 1, "adam_step counts iterations from 1");
    assert_eq!(params.len(), grads.len(), "parameter/gradient length");
    assert_eq!(params.len(), moments.m.len(), "parameter/moment length");
    let b1 = T::lit(cfg.adam_beta1);
    let b2 = T::lit(cfg.adam_beta2);
    let c1 = T::lit(1.0 - cfg.adam_beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.adam_beta2.powi(t as i32));
    let eps = T::lit(cfg.adam_eps);
    let lr_t = T::lit(lr);
    let decay = T::one() - T::lit(lr * cfg.weight_decay);
    let (one, ms, vs) = (T::one(), &mut moments.m, &mut moments.v);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(ms.iter_mut()).zip(vs.iter_mut()) {
        *p *= decay;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Piecewise-linear one-cycle schedule: warm up from `lr_max / start_div` to
/// `lr_max`, come back down over an equal span, then anneal to
/// `lr_max / final_div` over the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub warmup_frac: f64,
    pub decay_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            warmup_frac: 0.45,
            decay_frac: 0.45,
            start_div: 10.0,
            final_div: 100.0,
        }
    }
}

impl OneCycle {
    pub fn lr(&self, iter: usize, total_iters: usize, lr_max: f64) -> f64 {
        let total = total_iters.max(1) as f64;
        let t = iter as f64;
        let low = lr_max / self.start_div;
        let last = lr_max / self.final_div;
        let peak_at = self.warmup_frac * total;
        let floor_at = (self.warmup_frac + self.decay_frac) * total;
        if t <= peak_at {
            low + (lr_max - low) * t / peak_at
        } else if t <= floor_at {
            lr_max - (lr_max - low) * (t - peak_at) / (floor_at - peak_at)
        } else {
            low - (low - last) * (t - floor_at) / (total - floor_at)
        }
    }
}

pub fn one_cycle_lr(iter: usize, total_iters: usize, lr_max: f64) -> f64 {
    OneCycle::default().lr(iter, total_iters, lr_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub metric_interval_iters: usize,
    pub shuffle_seed: u64,
    pub probe_size: usize,
    pub histogram_class: usize,
    pub histogram_samples: usize,
    pub histogram_bins: usize,
    pub schedule: OneCycle,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            lr_max: 0.01,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            metric_interval_iters: 200,
            shuffle_seed: 0,
            probe_size: 2000,
            histogram_class: 0,
            histogram_samples: 200,
            histogram_bins: 36,
            schedule: OneCycle::default(),
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return fail("lr_max must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if self.metric_interval_iters == 0 {
            return fail("metric_interval_iters must be at least 1");
        }
        if self.histogram_bins == 0 {
            return fail("histogram_bins must be at least 1");
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss since the previous record.
    pub train_loss: f64,
    pub wc_intra: f64,
    pub w_inter: f64,
    pub c_inter: f64,
    /// Accuracy on the probe subset.
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub error_rate: f64,
    pub angle_stats: AngleStats<f64>,
    pub per_class_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Class histogram before training (epoch 0) and after every epoch.
    pub histograms: Vec<AngleHistogram>,
    pub final_eval: Evaluation,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T = f64> {
    pub mlp_config: MlpConfig,
    pub head_config: HeadConfig<T>,
    pub train_config: TrainConfig,
    pub iteration: usize,
    pub mlp: Mlp<T>,
    pub head: HeadState<T>,
    /// One entry per trainable tensor, in [`Checkpoint::tensor_names`] order.
    pub adam: Vec<Moments<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Fresh parameters: the MLP draws first from the init stream, then the head.
    pub fn init(
        mlp_config: MlpConfig,
        head_config: HeadConfig<T>,
        train_config: TrainConfig,
        num_classes: usize,
    ) -> Result<Self, TrainError> {
        mlp_config.validate()?;
        head_config.validate()?;
        train_config.validate()?;
        if num_classes < 2 {
            return Err(TrainError::Config("need at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mlp_config.init_seed);
        let mlp = Mlp::init_with(&mlp_config, &mut rng)?;
        let head = HeadState::init_random(head_config.kind, num_classes, mlp_config.embed_dim(), &mut rng);
        let mut ckpt = Self {
            mlp_config,
            head_config,
            train_config,
            iteration: 0,
            mlp,
            head,
            adam: Vec::new(),
        };
        ckpt.adam = ckpt.trainable_lens().into_iter().map(Moments::zeros).collect();
        Ok(ckpt)
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn trainable_lens(&self) -> Vec<usize> {
        let mut lens: Vec<usize> = self
            .mlp
            .layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().len(), l.bias.len()])
            .collect();
        lens.push(self.head.weights.as_slice().len());
        lens
    }

    /// Names of the Adam-trained tensors: every MLP weight and bias, then the head weights.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.mlp.layers.len())
            .flat_map(|l| [format!("mlp.{l}.weight"), format!("mlp.{l}.bias")])
            .collect();
        names.push("head.weight".into());
        names
    }

    pub fn embed(&self, x: &Matrix<T>) -> Result<Matrix<T>, TrainError> {
        embed(&self.mlp_config, &self.mlp, x)
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>, TrainError> {
        let emb = self.embed(x)?;
        let logits = loss_heads::predict_logits(&self.head_config, &self.head, &emb)?;
        Ok(loss_heads::argmax_rows(&logits))
    }

    pub fn is_finite(&self) -> bool {
        self.mlp
            .layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
            && self.head.weights.is_finite()
            && self.head.centers.as_ref().is_none_or(|c| c.is_finite())
            && self
                .adam
                .iter()
                .all(|m| m.m.iter().chain(&m.v).all(|v| v.is_finite()))
    }

    /// One optimization step on a batch.
    ///
    /// Nothing is modified when the loss or any gradient is non-finite.
    pub fn step(&mut self, x: &Matrix<T>, labels: &[usize], lr: f64) -> Result<StepOutcome<T>, TrainError> {
        let (emb, mlp_cache) = mlp_forward(&self.mlp_config, &self.mlp, x)?;
        let head_cache = loss_heads::forward(&self.head_config, &self.head, &emb, labels)?;
        let loss = loss_heads::loss(&head_cache, &self.head_config, &self.head);
        let rejected = StepOutcome { loss, applied: false };
        if !loss.is_finite() {
            return Ok(rejected);
        }
        let head_grads = loss_heads::backward(&head_cache, &self.head_config, &self.head)?;
        let mlp_grads = mlp_backward(&self.mlp, &mlp_cache, &head_grads.dx, false)?;
        let grads_finite = head_grads.dw.is_finite()
            && mlp_grads
                .layers
                .iter()
                .all(|g| g.weight.is_finite() && g.bias.iter().all(|b| b.is_finite()));
        if !grads_finite {
            return Ok(rejected);
        }

        self.iteration += 1;
        let t = self.iteration;
        let cfg = &self.train_config;
        let mut moments = self.adam.iter_mut();
        for (layer, grad) in self.mlp.layers.iter_mut().zip(&mlp_grads.layers) {
            let m = moments.next().expect("moment per tensor");
            adam_step(layer.weight.as_mut_slice(), grad.weight.as_slice(), m, t, lr, cfg);
            let m = moments.next().expect("moment per tensor");
            adam_step(&mut layer.bias, &grad.bias, m, t, lr, cfg);
        }
        let m = moments.next().expect("moment per tensor");
        adam_step(self.head.weights.as_mut_slice(), head_grads.dw.as_slice(), m, t, lr, cfg);
        if self.head_config.kind == HeadKind::CenterSoftmax {
            loss_heads::update_centers(&mut self.head, &head_cache, self.head_config.alpha)?;
        }
        Ok(StepOutcome { loss, applied: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome<T> {
    pub loss: T,
    /// False when a non-finite loss or gradient stopped the update.
    pub applied: bool,
}

/// Accuracy, per-class accuracy and angle statistics of `ckpt` on `data`.
pub fn evaluate<T: Scalar>(ckpt: &Checkpoint<T>, data: &Dataset<T>) -> Result<Evaluation, TrainError> {
    let classes = ckpt.num_classes();
    if data.num_classes > classes {
        return Err(TrainError::Config(format!(
            "dataset has {} classes, checkpoint {}",
            data.num_classes, classes
        )));
    }
    let emb = ckpt.embed(&data.features)?;
    let logits = loss_heads::predict_logits(&ckpt.head_config, &ckpt.head, &emb)?;
    let pred = loss_heads::argmax_rows(&logits);
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(&data.labels) {
        seen[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let accuracy = hits.iter().sum::<usize>() as f64 / data.len().max(1) as f64;
    let per_class_accuracy = hits
        .iter()
        .zip(&seen)
        .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect();
    let emb64 = emb.cast::<f64>();
    let centers = metrics::class_centers(&emb64, &data.labels, classes)?;
    let angle_stats = metrics::angle_stats(&ckpt.head.weights.cast::<f64>(), &centers)?;
    Ok(Evaluation {
        accuracy,
        error_rate: 1.0 - accuracy,
        angle_stats,
        per_class_accuracy,
    })
}

struct Probe<T> {
    data: Dataset<T>,
}

impl<T: Scalar> Probe<T> {
    fn stats(&self, ckpt: &Checkpoint<T>) -> Result<(AngleStats<f64>, f64, Matrix<f64>), TrainError> {
        let emb = ckpt.embed(&self.data.features)?;
        let logits = loss_heads::predict_logits(&ckpt.head_config, &ckpt.head, &emb)?;
        let hits = loss_heads::argmax_rows(&logits)
            .iter()
            .zip(&self.data.labels)
            .filter(|(p, y)| p == y)
            .count();
        let emb = emb.cast::<f64>();
        let centers = metrics::class_centers(&emb, &self.data.labels, ckpt.num_classes())?;
        let stats = metrics::angle_stats(&ckpt.head.weights.cast::<f64>(), &centers)?;
        Ok((stats, hits as f64 / self.data.len().max(1) as f64, emb))
    }

    fn histogram(
        &self,
        ckpt: &Checkpoint<T>,
        emb: &Matrix<f64>,
        epoch: usize,
    ) -> Result<AngleHistogram, TrainError> {
        let cfg = &ckpt.train_config;
        Ok(metrics::angle_histogram(
            emb,
            &self.data.labels,
            &ckpt.head.weights.cast::<f64>(),
            cfg.histogram_class,
            cfg.histogram_samples,
            cfg.histogram_bins,
            cfg.shuffle_seed.wrapping_add(epoch as u64),
            epoch,
        )?)
    }
}

/// Runs the full schedule on `data.train` and evaluates on `data.test`.
///
/// Interval metrics are computed on a fixed seeded probe subset of the
/// training split, logged at the first iteration, every
/// `metric_interval_iters`, and at the last iteration.
pub fn train<T: Scalar>(
    mlp_cfg: &MlpConfig,
    head_cfg: &HeadConfig<T>,
    data: &DataSplits<T>,
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint<T>, TrainLog), TrainError> {
    let train_set = &data.train;
    train_set.validate()?;
    data.test.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    if train_set.dim() != mlp_cfg.input_dim() {
        return Err(TrainError::Config(format!(
            "features have {} columns but the network expects {}",
            train_set.dim(),
            mlp_cfg.input_dim()
        )));
    }
    if train_cfg.augment.is_some() && train_set.image_shape.is_none() {
        return Err(TrainError::Config("augmentation needs image-shaped data".into()));
    }
    let mut ckpt = Checkpoint::init(
        mlp_cfg.clone(),
        *head_cfg,
        train_cfg.clone(),
        train_set.num_classes,
    )?;

    let probe = Probe {
        data: train_set.subset(train_cfg.probe_size, train_cfg.shuffle_seed ^ PROBE_SALT),
    };
    let per_epoch = train_cfg.iterations_per_epoch(train_set.len());
    let total = per_epoch * train_cfg.epochs;
    let mut records = Vec::new();
    let mut histograms = Vec::new();
    let (_, _, emb0) = probe.stats(&ckpt)?;
    histograms.push(probe.histogram(&ckpt, &emb0, 0)?);

    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for epoch in 0..train_cfg.epochs {
        let seed = train_cfg.shuffle_seed.wrapping_add(epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
        for batch in order.chunks(train_cfg.batch_size) {
            let lr = train_cfg.schedule.lr(ckpt.iteration, total, train_cfg.lr_max);
            let mut x = train_set.features.select_rows(batch);
            if let (Some(aug), Some(shape)) = (train_cfg.augment, train_set.image_shape) {
                x = augment_batch(&x, shape, aug.pad, aug.flip_p, &mut aug_rng)?;
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let last_good = ckpt.iteration;
            let outcome = ckpt.step(&x, &labels, lr)?;
            let loss = outcome.loss.to_f64_lossy();
            if !outcome.applied || !ckpt.is_finite() {
                return Err(TrainError::Diverged {
                    iteration: last_good + 1,
                    epoch,
                    last_good_iteration: last_good,
                    loss,
                });
            }
            loss_sum += loss;
            loss_count += 1;
            let t = ckpt.iteration;
            if t == 1 || t % train_cfg.metric_interval_iters == 0 || t == total {
                let (stats, train_acc, _) = probe.stats(&ckpt)?;
                records.push(LogRecord {
                    iteration: t,
                    epoch,
                    lr,
                    train_loss: loss_sum / loss_count as f64,
                    wc_intra: stats.wc_intra,
                    w_inter: stats.w_inter,
                    c_inter: stats.c_inter,
                    train_acc,
                });
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
        let (_, _, emb) = probe.stats(&ckpt)?;
        histograms.push(probe.histogram(&ckpt, &emb, epoch + 1)?);
    }

    let final_eval = evaluate(&ckpt, &data.test)?;
    Ok((
        ckpt,
        TrainLog {
            records,
            histograms,
            final_eval,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    mlp_config: MlpConfig,
    head_config: HeadConfig<f64>,
    train_config: TrainConfig,
    iteration: usize,
    num_classes: usize,
    tensors: Vec<Tensor>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn tensor(name: String, m: &Matrix<f64>) -> Tensor {
    Tensor {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice().to_vec(),
    }
}

fn vector(name: String, v: &[f64]) -> Tensor {
    Tensor {
        name,
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

/// Pulls named tensors out of a checkpoint file, checking shapes.
struct TensorTable(Vec<Tensor>);

impl TensorTable {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>, TrainError> {
        let pos = self
            .0
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {name}")))?;
        let t = self.0.swap_remove(pos);
        let len: usize = t.shape.iter().product();
        if t.shape != shape || t.data.len() != len {
            return Err(TrainError::Checkpoint(format!(
                "tensor {name} has shape {:?} with {} values, expected {shape:?}",
                t.shape,
                t.data.len()
            )));
        }
        if let Some(bad) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::Checkpoint(format!(
                "tensor {name} holds a non-finite value at {bad}"
            )));
        }
        Ok(t.data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f64>, TrainError> {
        Ok(Matrix::new(rows, cols, self.take(name, &[rows, cols])?)?)
    }
}

impl Checkpoint<f64> {
    /// JSON document: a header (`format_version`, configs, iteration) and a
    /// list of named tensors `{name, shape, data}` in row-major order.
    pub fn to_json(&self) -> Result<String, TrainError> {
        let mut tensors = Vec::new();
        for (l, layer) in self.mlp.layers.iter().enumerate() {
            tensors.push(tensor(format!("mlp.{l}.weight"), &layer.weight));
            tensors.push(vector(format!("mlp.{l}.bias"), &layer.bias));
        }
        tensors.push(tensor("head.weight".into(), &self.head.weights));
        if let Some(c) = &self.head.centers {
            tensors.push(tensor("head.centers".into(), c));
        }
        for (name, m) in self.tensor_names().into_iter().zip(&self.adam) {
            tensors.push(vector(format!("adam.{name}.m"), &m.m));
            tensors.push(vector(format!("adam.{name}.v"), &m.v));
        }
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            mlp_config: self.mlp_config.clone(),
            head_config: self.head_config,
            train_config: self.train_config.clone(),
            iteration: self.iteration,
            num_classes: self.num_classes(),
            tensors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::CheckpointVersion {
                found: probe.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let file: CheckpointFile = serde_json::from_str(text)?;
        file.mlp_config.validate()?;
        file.head_config.validate()?;
        let dims = &file.mlp_config.layer_dims;
        let mut table = TensorTable(file.tensors);
        let mut layers = Vec::new();
        for (l, w) in dims.windows(2).enumerate() {
            layers.push(Dense {
                weight: table.matrix(&format!("mlp.{l}.weight"), w[0], w[1])?,
                bias: table.take(&format!("mlp.{l}.bias"), &[w[1]])?,
            });
        }
        let (c, d) = (file.num_classes, file.mlp_config.embed_dim());
        let weights = table.matrix("head.weight", c, d)?;
        let centers = if file.head_config.kind == HeadKind::CenterSoftmax {
            Some(table.matrix("head.centers", c, d)?)
        } else {
            None
        };
        let mut ckpt = Self {
            head: HeadState::new(file.head_config.kind, weights, centers)?,
            mlp: Mlp { layers },
            mlp_config: file.mlp_config,
            head_config: file.head_config,
            train_config: file.train_config,
            iteration: file.iteration,
            adam: Vec::new(),
        };
        for (name, len) in ckpt.tensor_names().into_iter().zip(ckpt.trainable_lens()) {
            let m = table.take(&format!("adam.{name}.m"), &[len])?;
            let v = table.take(&format!("adam.{name}.v"), &[len])?;
            ckpt.adam.push(Moments { m, v });
        }
        if let Some(extra) = table.0.first() {
            return Err(TrainError::Checkpoint(format!("unexpected tensor {}", extra.name)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_json()?).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

//! Classification heads that sit on top of an embedding: plain softmax,
//! normalized cosine softmax, ArcFace, the angular head, and softmax with a
//! center-loss term.
//!
//! Every head produces a [`ForwardCache`] holding the cosines, angles, logits
//! and probabilities of a batch; [`loss`] and [`backward`] consume it. The
//! cross-entropy part is shared: `dL/dZ = (P - onehot) / N` for all heads, and
//! each head only differs in how `Z` depends on the embedding and the class
//! weights.
//!
//! The angular head uses `Z = s * (pi - theta)`. Since softmax is invariant
//! to per-row shifts this is the same model as `Z = -s * theta`, its angular
//! gradient is the constant `-s`, and with `theta_target = 0`,
//! `theta_other = pi/2` the target probability is
//! `e^{s pi} / (e^{s pi} + (C-1) e^{s pi/2})`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    self, l2_normalize_rows, matmul, row_max, tail_mass, matmul_nt, matmul_tn, safe_arccos,
    safe_arccos_grad, softmax_rows, Matrix, NumericsError, DEFAULT_CLAMP_EPS, NORM_EPS,
};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("label {label} of sample {index} is outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("{0} labels given for {1} embeddings")]
    LabelCount(usize, usize),
    #[error(transparent)]
    Shape(#[from] NumericsError),
    #[error("invalid head configuration: {0}")]
    InvalidConfig(String),
    #[error("{op} is not defined for the {kind} head")]
    Unsupported { kind: HeadKind, op: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Softmax,
    NormSoftmax,
    ArcFace,
    Angular,
    CenterSoftmax,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Softmax,
        HeadKind::NormSoftmax,
        HeadKind::ArcFace,
        HeadKind::Angular,
        HeadKind::CenterSoftmax,
    ];

    /// Short name used on the command line and in output files.
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Softmax => "soft",
            HeadKind::NormSoftmax => "norm",
            HeadKind::ArcFace => "arcface",
            HeadKind::Angular => "angular",
            HeadKind::CenterSoftmax => "center",
        }
    }

    /// Whether logits are built from L2-normalized embeddings and weights.
    pub fn normalizes(self) -> bool {
        matches!(
            self,
            HeadKind::NormSoftmax | HeadKind::ArcFace | HeadKind::Angular
        )
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "soft" | "softmax" => Ok(HeadKind::Softmax),
            "norm" | "normsoftmax" | "cosine" => Ok(HeadKind::NormSoftmax),
            "arcface" => Ok(HeadKind::ArcFace),
            "angular" | "arc" => Ok(HeadKind::Angular),
            "center" | "centersoftmax" => Ok(HeadKind::CenterSoftmax),
            other => Err(HeadError::InvalidConfig(format!("unknown head `{other}`"))),
        }
    }
}

/// Which head is active plus its hyperparameters.
///
/// `s` is the rescale factor (normalized heads), `m` the additive angular
/// margin in radians (ArcFace), `lambda` the center-loss weight and `alpha`
/// the center update rate (CenterSoftmax).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig<T = f64> {
    pub kind: HeadKind,
    pub s: T,
    pub m: T,
    pub lambda: T,
    pub alpha: T,
    pub clamp_eps: T,
}

impl<T: Scalar> HeadConfig<T> {
    /// Configuration for `kind` with s = 1, m = 0.5, lambda = 0.01, alpha = 0.5.
    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            s: T::one(),
            m: T::lit(0.5),
            lambda: T::lit(0.01),
            alpha: T::lit(0.5),
            clamp_eps: T::lit(DEFAULT_CLAMP_EPS),
        }
    }

    pub fn softmax() -> Self {
        Self::new(HeadKind::Softmax)
    }

    pub fn norm_softmax(s: T) -> Self {
        Self {
            s,
            ..Self::new(HeadKind::NormSoftmax)
        }
    }

    pub fn arcface(s: T, m: T) -> Self {
        Self {
            s,
            m,
            ..Self::new(HeadKind::ArcFace)
        }
    }

    pub fn angular(s: T) -> Self {
        Self {
            s,
            ..Self::new(HeadKind::Angular)
        }
    }

    pub fn center(lambda: T, alpha: T) -> Self {
        Self {
            lambda,
            alpha,
            ..Self::new(HeadKind::CenterSoftmax)
        }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |msg: String| Err(HeadError::InvalidConfig(msg));
        if !(self.s > T::zero()) || !self.s.is_finite() {
            return bad(format!("s must be positive, got {}", self.s));
        }
        if self.kind == HeadKind::ArcFace && !(self.m >= T::zero() && self.m < T::FRAC_PI_2()) {
            return bad(format!("m must lie in [0, pi/2), got {}", self.m));
        }
        if self.kind == HeadKind::CenterSoftmax {
            if !(self.lambda >= T::zero()) {
                return bad(format!("lambda must be non-negative, got {}", self.lambda));
            }
            if !(self.alpha > T::zero() && self.alpha <= T::one()) {
                return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
            }
        }
        if !(self.clamp_eps > T::zero() && self.clamp_eps <= T::lit(1e-3)) {
            return bad(format!("clamp_eps must lie in (0, 1e-3], got {}", self.clamp_eps));
        }
        Ok(())
    }
}

/// Learnable head parameters: one weight row per class, plus class centers
/// for the center-loss head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState<T = f64> {
    pub weights: Matrix<T>,
    pub centers: Option<Matrix<T>>,
}

impl<T: Scalar> HeadState<T> {
    pub fn new(
        kind: HeadKind,
        weights: Matrix<T>,
        centers: Option<Matrix<T>>,
    ) -> Result<Self, HeadError> {
        match (&centers, kind) {
            (Some(c), HeadKind::CenterSoftmax) if c.shape() != weights.shape() => {
                return Err(NumericsError::ShapeMismatch {
                    op: "HeadState::new",
                    left: weights.shape(),
                    right: c.shape(),
                }
                .into());
            }
            (Some(_), HeadKind::CenterSoftmax) => {}
            (None, HeadKind::CenterSoftmax) => {
                return Err(HeadError::InvalidConfig(
                    "center head requires class centers".into(),
                ))
            }
            (Some(_), _) => {
                return Err(HeadError::InvalidConfig(format!(
                    "{kind} head carries no class centers"
                )))
            }
            (None, _) => {}
        }
        Ok(Self { weights, centers })
    }

    /// Uniform weights in `[-1/sqrt(d), 1/sqrt(d)]`; centers start at the origin.
    pub fn init_random<R: Rng + ?Sized>(
        kind: HeadKind,
        num_classes: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (embed_dim.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weights = Matrix::from_fn(num_classes, embed_dim, |_, _| T::lit(dist.sample(rng)));
        let centers =
            (kind == HeadKind::CenterSoftmax).then(|| Matrix::zeros(num_classes, embed_dim));
        Self { weights, centers }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Batch intermediates shared by [`loss`], [`backward`] and the metrics.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f64> {
    pub x: Matrix<T>,
    pub x_hat: Matrix<T>,
    pub w_hat: Matrix<T>,
    pub x_norms: Vec<T>,
    pub w_norms: Vec<T>,
    pub cosines: Matrix<T>,
    /// Angle between each embedding and each class weight, in `(0, pi)`.
    pub angles: Matrix<T>,
    pub logits: Matrix<T>,
    pub probs: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }

    /// Index of the largest logit per sample.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

/// Gradients of [`loss`] with respect to the embeddings, the class weights
/// and (center head only) the class centers.
#[derive(Debug, Clone)]
pub struct HeadGrads<T = f64> {
    pub dx: Matrix<T>,
    pub dw: Matrix<T>,
    pub dcenters: Option<Matrix<T>>,
}

pub fn argmax_rows<T: Scalar>(m: &Matrix<T>) -> Vec<usize> {
    m.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<(), HeadError> {
    if labels.len() != n {
        return Err(HeadError::LabelCount(labels.len(), n));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(HeadError::LabelOutOfRange {
            index,
            label,
            classes,
        });
    }
    Ok(())
}

/// ArcFace target logit `s * cos(theta + m)` written as
/// `s * (c cos m - sin(theta) sin m)` so that `m = 0` reproduces `s * c` exactly.
#[inline]
fn arcface_target<T: Scalar>(c: T, s: T, m: T, eps: T) -> T {
    let hi = T::one() - eps;
    let cc = c.max(-hi).min(hi);
    s * (c * m.cos() - (T::one() - cc * cc).sqrt() * m.sin())
}

#[inline]
fn arcface_target_grad<T: Scalar>(c: T, s: T, m: T, eps: T) -> T {
    let hi = T::one() - eps;
    let sin_term = if c >= hi || c <= -hi {
        T::zero()
    } else {
        c / (T::one() - c * c).sqrt()
    };
    s * (m.cos() + m.sin() * sin_term)
}

pub fn forward<T: Scalar>(
    config: &HeadConfig<T>,
    state: &HeadState<T>,
    x: &Matrix<T>,
    labels: &[usize],
) -> Result<ForwardCache<T>, HeadError> {
    if x.cols() != state.embed_dim() {
        return Err(NumericsError::ShapeMismatch {
            op: "forward",
            left: x.shape(),
            right: state.weights.shape(),
        }
        .into());
    }
    let classes = state.num_classes();
    check_labels(labels, x.rows(), classes)?;

    let norm_eps = T::lit(NORM_EPS);
    let x_hat = l2_normalize_rows(x, norm_eps);
    let w_hat = l2_normalize_rows(&state.weights, norm_eps);
    let cosines = matmul_nt(&x_hat, &w_hat)?;
    let eps = config.clamp_eps;
    let angles = cosines.map(|c| safe_arccos(c, eps));
    let s = config.s;

    let logits = match config.kind {
        HeadKind::Softmax | HeadKind::CenterSoftmax => matmul_nt(x, &state.weights)?,
        HeadKind::NormSoftmax => cosines.map(|c| s * c),
        HeadKind::ArcFace => {
            let mut z = cosines.map(|c| s * c);
            for (i, &y) in labels.iter().enumerate() {
                z[(i, y)] = arcface_target(cosines[(i, y)], s, config.m, eps);
            }
            z
        }
        HeadKind::Angular => angles.map(|theta| s * (T::PI() - theta)),
    };
    let probs = softmax_rows(&logits);

    Ok(ForwardCache {
        x_norms: x.row_norms(),
        w_norms: state.weights.row_norms(),
        x: x.clone(),
        x_hat,
        w_hat,
        cosines,
        angles,
        logits,
        probs,
        labels: labels.to_vec(),
    })
}

/// Label-free class scores used for prediction.
///
/// Identical to the training logits except that ArcFace drops its margin,
/// since the margin is only defined relative to a known target class.
pub fn predict_logits<T: Scalar>(
    config: &HeadConfig<T>,
    state: &HeadState<T>,
    x: &Matrix<T>,
) -> Result<Matrix<T>, HeadError> {
    if x.cols() != state.embed_dim() {
        return Err(NumericsError::ShapeMismatch {
            op: "predict_logits",
            left: x.shape(),
            right: state.weights.shape(),
        }
        .into());
    }
    let s = config.s;
    Ok(match config.kind {
        HeadKind::Softmax | HeadKind::CenterSoftmax => matmul_nt(x, &state.weights)?,
        kind => {
            let norm_eps = T::lit(NORM_EPS);
            let cosines = matmul_nt(
                &l2_normalize_rows(x, norm_eps),
                &l2_normalize_rows(&state.weights, norm_eps),
            )?;
            if kind == HeadKind::Angular {
                cosines.map(|c| s * (T::PI() - safe_arccos(c, config.clamp_eps)))
            } else {
                cosines.map(|c| s * c)
            }
        }
    })
}

/// Mean cross-entropy of `logits` against `labels`.
///
/// Each term is `(max - z_y) + ln_1p(tail)`, which stays positive even when
/// the target logit dominates by hundreds of units.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> T {
    let n = T::from_usize(labels.len().max(1)).unwrap();
    labels
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (i, &y)| {
            let row = logits.row(i);
            let (arg, max) = row_max(row);
            acc + (max - row[y]) + tail_mass(row, arg, max).ln_1p()
        })
        / n
}

/// `(P - onehot) / N`, the cross-entropy gradient with respect to the logits.
pub fn logit_grad<T: Scalar>(probs: &Matrix<T>, labels: &[usize]) -> Matrix<T> {
    let n = T::from_usize(labels.len().max(1)).unwrap();
    let mut g = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        g[(i, y)] -= T::one();
    }
    g.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    g
}

pub fn loss<T: Scalar>(cache: &ForwardCache<T>, config: &HeadConfig<T>, state: &HeadState<T>) -> T {
    let mut total = cross_entropy(&cache.logits, &cache.labels);
    if config.kind == HeadKind::CenterSoftmax {
        if let Some(centers) = &state.centers {
            let n = T::from_usize(cache.batch_size().max(1)).unwrap();
            let mut sq = T::zero();
            for (i, &y) in cache.labels.iter().enumerate() {
                sq += cache
                    .x
                    .row(i)
                    .iter()
                    .zip(centers.row(y))
                    .fold(T::zero(), |acc, (&a, &c)| acc + (a - c) * (a - c));
            }
            total += config.lambda * sq / (n + n);
        }
    }
    total
}

/// Back-propagates through `v_hat = v / max(|v|, eps)` row by row.
fn normalize_backward<T: Scalar>(v_hat: &Matrix<T>, norms: &[T], d_hat: &Matrix<T>) -> Matrix<T> {
    let eps = T::lit(NORM_EPS);
    let mut out = d_hat.clone();
    for (i, &r) in norms.iter().enumerate() {
        let row = out.row_mut(i);
        if r > eps {
            let proj = numerics::dot(v_hat.row(i), d_hat.row(i));
            for (o, &u) in row.iter_mut().zip(v_hat.row(i)) {
                *o = (*o - u * proj) / r;
            }
        } else {
            row.iter_mut().for_each(|o| *o /= eps);
        }
    }
    out
}

pub fn backward<T: Scalar>(
    cache: &ForwardCache<T>,
    config: &HeadConfig<T>,
    state: &HeadState<T>,
) -> Result<HeadGrads<T>, HeadError> {
    let g = logit_grad(&cache.probs, &cache.labels);
    let s = config.s;
    let eps = config.clamp_eps;

    let (mut dx, dw) = if config.kind.normalizes() {
        // dL/dcos, elementwise chain through each head's logit map
        let mut gc = g;
        match config.kind {
            HeadKind::NormSoftmax => gc.as_mut_slice().iter_mut().for_each(|v| *v *= s),
            HeadKind::ArcFace => {
                gc.as_mut_slice().iter_mut().for_each(|v| *v *= s);
                for (i, &y) in cache.labels.iter().enumerate() {
                    let factor = arcface_target_grad(cache.cosines[(i, y)], s, config.m, eps);
                    gc[(i, y)] = gc[(i, y)] / s * factor;
                }
            }
            HeadKind::Angular => {
                for (v, &c) in gc.as_mut_slice().iter_mut().zip(cache.cosines.as_slice()) {
                    *v *= -s * safe_arccos_grad(c, eps);
                }
            }
            _ => unreachable!("raw heads handled below"),
        }
        let dx_hat = matmul(&gc, &cache.w_hat)?;
        let dw_hat = matmul_tn(&gc, &cache.x_hat)?;
        (
            normalize_backward(&cache.x_hat, &cache.x_norms, &dx_hat),
            normalize_backward(&cache.w_hat, &cache.w_norms, &dw_hat),
        )
    } else {
        (matmul(&g, &state.weights)?, matmul_tn(&g, &cache.x)?)
    };

    let dcenters = match (&state.centers, config.kind) {
        (Some(centers), HeadKind::CenterSoftmax) => {
            let n = T::from_usize(cache.batch_size().max(1)).unwrap();
            let scale = config.lambda / n;
            let mut dc = Matrix::zeros(centers.rows(), centers.cols());
            for (i, &y) in cache.labels.iter().enumerate() {
                let xi = cache.x.row(i);
                let cy = centers.row(y);
                for k in 0..xi.len() {
                    let diff = scale * (xi[k] - cy[k]);
                    dx[(i, k)] += diff;
                    dc[(y, k)] -= diff;
                }
            }
            Some(dc)
        }
        _ => None,
    };

    Ok(HeadGrads { dx, dw, dcenters })
}

/// Analytic `dZ/dtheta` of the target logit at each angle, assuming unit
/// norms for the embedding and the class weight.
pub fn angular_gradient_curve<T: Scalar>(
    config: &HeadConfig<T>,
    theta: &[T],
) -> Result<Vec<T>, HeadError> {
    let s = config.s;
    let curve = match config.kind {
        HeadKind::Softmax | HeadKind::NormSoftmax => theta.iter().map(|&t| -s * t.sin()).collect(),
        HeadKind::ArcFace => theta.iter().map(|&t| -s * (t + config.m).sin()).collect(),
        HeadKind::Angular => vec![-s; theta.len()],
        HeadKind::CenterSoftmax => {
            return Err(HeadError::Unsupported {
                kind: config.kind,
                op: "angular_gradient_curve",
            })
        }
    };
    Ok(curve)
}

/// Target/non-target probabilities and angle gradients of the angular loss
/// when the target angle is 0 and every other angle is pi/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormGradient {
    pub p_target: f64,
    pub p_other: f64,
    /// `dL/dtheta_target = -s (P(y) - 1)`
    pub g_target: f64,
    /// `dL/dtheta_j = -s P(j)`
    pub g_other: f64,
}

pub fn loss_angle_gradient_closed_form(s: f64, num_classes: usize) -> ClosedFormGradient {
    let others = (num_classes.saturating_sub(1)) as f64;
    // divide numerator and denominator by e^{s pi}: only e^{-s pi / 2} remains
    let ratio = (-s * FRAC_PI_2).exp();
    let denom = 1.0 + others * ratio;
    let p_target = 1.0 / denom;
    let p_other = ratio / denom;
    ClosedFormGradient {
        p_target,
        p_other,
        // P(y) - 1 = -(C - 1) P(j), without the cancellation
        g_target: s * others * p_other,
        g_other: -s * p_other,
    }
}

/// `log(P(y) / P(j))` under the same geometry; the class count cancels.
pub fn prob_log_ratio(s: f64) -> f64 {
    s * FRAC_PI_2
}

/// Moves each class center present in the batch toward its samples:
/// `c_j -= alpha * sum_i (c_j - x_i) / (1 + n_j)`.
pub fn update_centers<T: Scalar>(
    state: &mut HeadState<T>,
    cache: &ForwardCache<T>,
    alpha: T,
) -> Result<(), HeadError> {
    let Some(centers) = state.centers.as_mut() else {
        return Err(HeadError::InvalidConfig(
            "update_centers needs a center head".into(),
        ));
    };
    let (classes, dim) = centers.shape();
    let mut delta = Matrix::<T>::zeros(classes, dim);
    let mut counts = vec![0usize; classes];
    for (i, &y) in cache.labels.iter().enumerate() {
        counts[y] += 1;
        let xi = cache.x.row(i);
        let cy = centers.row(y);
        for k in 0..dim {
            delta[(y, k)] += cy[k] - xi[k];
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let scale = alpha / T::from_usize(count + 1).unwrap();
        for k in 0..dim {
            centers[(j, k)] -= scale * delta[(j, k)];
        }
    }
    Ok(())
}

/// Forward plus loss in one call; handy for finite-difference checks.
pub fn head_loss<T: Scalar>(
    config: &HeadConfig<T>,
    state: &HeadState<T>,
    x: &Matrix<T>,
    labels: &[usize],
) -> Result<T, HeadError> {
    let cache = forward(config, state, x, labels)?;
    Ok(loss(&cache, config, state))
}

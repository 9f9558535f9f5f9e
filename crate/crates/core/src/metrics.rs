//! Embedding quality measurements: class centers, the three mean-angle
//! statistics (weight/weight, center/center, center/weight), cosine
//! similarity matrices between sampled features, and per-class angle
//! histograms.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    dot, l2_normalize_rows, matmul_nt, norm, safe_arccos, Matrix, NumericsError,
    DEFAULT_CLAMP_EPS, NORM_EPS,
};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("{which} row {row} has zero norm")]
    ZeroRow { which: &'static str, row: usize },
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("label {label} is outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error(transparent)]
    Shape(#[from] NumericsError),
}

/// Mean angles, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleStats<T = f64> {
    /// Mean angle between distinct class weight vectors.
    pub w_inter: T,
    /// Mean angle between distinct class feature centers.
    pub c_inter: T,
    /// Mean angle between each class center and its own weight vector.
    pub wc_intra: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix<T = f64> {
    /// `K x K` cosine similarities.
    pub entries: Matrix<T>,
    /// Row indices of the sampled features in the source set.
    pub sample_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleHistogram {
    pub epoch: usize,
    pub class_id: usize,
    /// `bins + 1` edges spanning `[0, pi]`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Per-class mean of the embeddings.
pub fn class_centers<T: Scalar>(
    x: &Matrix<T>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Matrix<T>, MetricsError> {
    if labels.len() != x.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "class_centers",
            left: x.shape(),
            right: (labels.len(), 1),
        }
        .into());
    }
    let mut sums = Matrix::zeros(num_classes, x.cols());
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in x.iter_rows().zip(labels) {
        if y >= num_classes {
            return Err(MetricsError::LabelOutOfRange {
                label: y,
                classes: num_classes,
            });
        }
        counts[y] += 1;
        for (acc, &v) in sums.row_mut(y).iter_mut().zip(row) {
            *acc += v;
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(MetricsError::EmptyClass(j));
        }
        let n = T::from_usize(count).unwrap();
        sums.row_mut(j).iter_mut().for_each(|v| *v /= n);
    }
    Ok(sums)
}

/// Angle between two nonzero vectors through the clamped arccos.
pub fn angle_between<T: Scalar>(a: &[T], b: &[T]) -> T {
    let c = dot(a, b) / (norm(a) * norm(b));
    safe_arccos(c, T::lit(DEFAULT_CLAMP_EPS))
}

fn unit_rows<T: Scalar>(m: &Matrix<T>, which: &'static str) -> Result<Matrix<T>, MetricsError> {
    if let Some(row) = m.row_norms().iter().position(|&r| !(r > T::lit(NORM_EPS))) {
        return Err(MetricsError::ZeroRow { which, row });
    }
    Ok(l2_normalize_rows(m, T::lit(NORM_EPS)))
}

fn mean_pairwise_angle<T: Scalar>(unit: &Matrix<T>) -> T {
    let c = unit.rows();
    let eps = T::lit(DEFAULT_CLAMP_EPS);
    let mut total = T::zero();
    for i in 0..c {
        for j in 0..c {
            if i != j {
                total += safe_arccos(dot(unit.row(i), unit.row(j)), eps);
            }
        }
    }
    total / T::from_usize(c * c - c).unwrap()
}

pub fn angle_stats<T: Scalar>(
    weights: &Matrix<T>,
    centers: &Matrix<T>,
) -> Result<AngleStats<T>, MetricsError> {
    if weights.shape() != centers.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "angle_stats",
            left: weights.shape(),
            right: centers.shape(),
        }
        .into());
    }
    let c = weights.rows();
    if c < 2 {
        return Err(MetricsError::TooFewClasses(c));
    }
    let w = unit_rows(weights, "weight")?;
    let ctr = unit_rows(centers, "center")?;
    let eps = T::lit(DEFAULT_CLAMP_EPS);
    let wc_intra = (0..c).fold(T::zero(), |acc, j| {
        acc + safe_arccos(dot(w.row(j), ctr.row(j)), eps)
    }) / T::from_usize(c).unwrap();
    Ok(AngleStats {
        w_inter: mean_pairwise_angle(&w),
        c_inter: mean_pairwise_angle(&ctr),
        wc_intra,
    })
}

/// Gram matrix of the L2-normalized rows.
pub fn confusion_matrix<T: Scalar>(x_sampled: &Matrix<T>) -> Result<ConfusionMatrix<T>, MetricsError> {
    let unit = unit_rows(x_sampled, "feature")?;
    let entries = matmul_nt(&unit, &unit)?;
    Ok(ConfusionMatrix {
        entries,
        sample_ids: (0..x_sampled.rows()).collect(),
    })
}

impl<T: Scalar> ConfusionMatrix<T> {
    /// Mean of `|CM_ij|` over pairs whose labels differ.
    pub fn mean_abs_inter_class(&self, labels: &[usize]) -> T {
        let k = self.entries.rows();
        let mut total = T::zero();
        let mut pairs = 0usize;
        for i in 0..k {
            for j in 0..k {
                if labels[i] != labels[j] {
                    total += self.entries[(i, j)].abs();
                    pairs += 1;
                }
            }
        }
        if pairs == 0 {
            T::zero()
        } else {
            total / T::from_usize(pairs).unwrap()
        }
    }
}

/// Seeded draw of up to `per_class` row indices from every class, without
/// replacement; classes appear in ascending order.
pub fn sample_per_class(
    labels: &[usize],
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        let take = per_class.min(members.len());
        let mut picked: Vec<usize> = sample(&mut rng, members.len(), take)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    out
}

/// Cosine similarity matrix of `per_class` seeded samples from every class.
pub fn sampled_confusion<T: Scalar>(
    x: &Matrix<T>,
    labels: &[usize],
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<ConfusionMatrix<T>, MetricsError> {
    let ids = sample_per_class(labels, num_classes, per_class, seed);
    let mut cm = confusion_matrix(&x.select_rows(&ids))?;
    cm.sample_ids = ids;
    Ok(cm)
}

/// Histogram over `[0, pi]` of the angle between `W_class` and up to
/// `sample_n` randomly chosen features of that class.
///
/// Bins are right-open except the last, which is closed.
#[allow(clippy::too_many_arguments)]
pub fn angle_histogram<T: Scalar>(
    x: &Matrix<T>,
    labels: &[usize],
    weights: &Matrix<T>,
    class_id: usize,
    sample_n: usize,
    bins: usize,
    seed: u64,
    epoch: usize,
) -> Result<AngleHistogram, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let members: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == class_id)
        .map(|(i, _)| i)
        .collect();
    if members.is_empty() {
        return Err(MetricsError::EmptyClass(class_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, members.len(), sample_n.min(members.len()))
        .into_iter()
        .map(|k| members[k])
        .collect();
    picked.sort_unstable();

    let pi = std::f64::consts::PI;
    let bin_edges: Vec<f64> = (0..=bins).map(|k| pi * k as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    let w = weights.row(class_id);
    for i in picked {
        let theta = angle_between(x.row(i), w).to_f64_lossy();
        // number of interior edges <= theta
        let bin = bin_edges[1..bins].partition_point(|&e| e <= theta);
        counts[bin] += 1;
    }
    Ok(AngleHistogram {
        epoch,
        class_id,
        bin_edges,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type Matrix = super::Matrix<f64>;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn centers_of_singletons_are_samples() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let c = class_centers(&x, &[1, 0], 2).unwrap();
        assert_eq!(c.row(0), x.row(1));
        assert_eq!(c.row(1), x.row(0));
    }

    #[test]
    fn opposite_samples_cancel() {
        let x = Matrix::from_rows(&[[0.7, -0.2], [-0.7, 0.2], [1.0, 1.0]]).unwrap();
        let c = class_centers(&x, &[0, 0, 1], 2).unwrap();
        assert_eq!(c.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn centers_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(30, 4, &mut rng);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let c = class_centers(&x, &labels, 3).unwrap();
        for j in 0..3 {
            for k in 0..4 {
                let vals: Vec<f64> = (0..30).filter(|i| labels[*i] == j).map(|i| x[(i, k)]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((c[(j, k)] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_class_is_named() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(class_centers(&x, &[0], 3).unwrap_err(), MetricsError::EmptyClass(1));
    }

    #[test]
    fn identical_weights_and_centers() {
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = angle_stats(&w, &w).unwrap();
        assert!(s.wc_intra < 4.5e-4);
        assert!((s.w_inter - FRAC_PI_2).abs() < 1e-15);
        assert!((s.c_inter - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn angle_stats_match_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(4, 3, &mut rng);
        let c = random(4, 3, &mut rng);
        let s = angle_stats(&w, &c).unwrap();
        let ang = |a: &[f64], b: &[f64]| {
            let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
                / (a.iter().map(|v| v * v).sum::<f64>().sqrt()
                    * b.iter().map(|v| v * v).sum::<f64>().sqrt());
            cos.acos()
        };
        let (mut wi, mut ci, mut wc) = (0.0, 0.0, 0.0);
        for i in 0..4 {
            wc += ang(w.row(i), c.row(i));
            for j in 0..4 {
                if i != j {
                    wi += ang(w.row(i), w.row(j));
                    ci += ang(c.row(i), c.row(j));
                }
            }
        }
        assert!((s.w_inter - wi / 12.0).abs() < 1e-12);
        assert!((s.c_inter - ci / 12.0).abs() < 1e-12);
        assert!((s.wc_intra - wc / 4.0).abs() < 1e-12);
    }

    #[test]
    fn angle_stats_rejects_zero_rows() {
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let c = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(
            angle_stats(&w, &c).unwrap_err(),
            MetricsError::ZeroRow { which: "weight", row: 1 }
        );
        assert!(matches!(angle_stats(&c, &w), Err(MetricsError::ZeroRow { which: "center", .. })));
    }

    #[test]
    fn confusion_identical_and_orthogonal() {
        let same = Matrix::from_rows(&[[2.0, 1.0], [2.0, 1.0], [4.0, 2.0]]).unwrap();
        let cm = confusion_matrix(&same).unwrap();
        assert!(cm.entries.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-15));
        let ortho = Matrix::from_rows(&[[0.0, 3.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, -1.0]]).unwrap();
        assert_eq!(confusion_matrix(&ortho).unwrap().entries, Matrix::identity(3));
        assert!(confusion_matrix(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn confusion_matches_pairwise_dots() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(5, 4, &mut rng);
        let cm = confusion_matrix(&x).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (a, b) = (x.row(i), x.row(j));
                let cos = a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (norm(a) * norm(b));
                assert!((cm.entries[(i, j)] - cos).abs() < 1e-12);
                assert_eq!(cm.entries[(i, j)], cm.entries[(j, i)]);
            }
        }
    }

    #[test]
    fn inter_class_mean_ignores_same_class_pairs() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let cm = confusion_matrix(&x).unwrap();
        assert_eq!(cm.mean_abs_inter_class(&[0, 0, 1]), 0.0);
        assert_eq!(cm.mean_abs_inter_class(&[0, 1, 1]), 0.5);
    }

    #[test]
    fn histogram_parallel_features() {
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[[2.0, 0.0], [0.5, 0.0], [3.0, 0.0]]).unwrap();
        let h = angle_histogram(&x, &[0, 0, 0], &w, 0, 200, 10, 1, 0).unwrap();
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn histogram_boundary_goes_right() {
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.0, 1.0], [0.0, -2.0], [-1.0, 0.0]]).unwrap();
        let h = angle_histogram(&x, &[0, 0, 0], &w, 0, 200, 2, 1, 3).unwrap();
        // pi/2 twice on the interior edge, pi (clamped just below) in the closed last bin
        assert_eq!(h.counts, vec![0, 3]);
        assert_eq!(h.bin_edges, vec![0.0, FRAC_PI_2, PI]);
        assert_eq!(h.epoch, 3);
    }

    #[test]
    fn histogram_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(500, 6, &mut rng);
        let w = random(3, 6, &mut rng);
        let labels: Vec<usize> = (0..500).map(|i| i % 3).collect();
        let a = angle_histogram(&x, &labels, &w, 1, 50, 12, 77, 0).unwrap();
        let b = angle_histogram(&x, &labels, &w, 1, 50, 12, 77, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts.iter().sum::<usize>(), 50);
        assert!(a.bin_edges.windows(2).all(|e| e[1] > e[0]));
        assert!(angle_histogram(&x, &labels, &w, 1, 50, 0, 77, 0).is_err());
    }

    #[test]
    fn per_class_sampling() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let ids = sample_per_class(&labels, 4, 10, 5);
        assert_eq!(ids.len(), 40);
        for (k, chunk) in ids.chunks(10).enumerate() {
            assert!(chunk.iter().all(|&i| labels[i] == k));
            assert!(chunk.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(ids, sample_per_class(&labels, 4, 10, 5));
    }

    proptest! {
        #[test]
        fn stats_ignore_row_scale(seed in 0u64..300, scales in prop::collection::vec(0.01f64..100.0, 8)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(4, 3, &mut rng);
            let c = random(4, 3, &mut rng);
            let base = angle_stats(&w, &c).unwrap();
            let ws = Matrix::from_fn(4, 3, |i, j| w[(i, j)] * scales[i]);
            let cs = Matrix::from_fn(4, 3, |i, j| c[(i, j)] * scales[4 + i]);
            let scaled = angle_stats(&ws, &cs).unwrap();
            prop_assert!((base.w_inter - scaled.w_inter).abs() < 1e-12);
            prop_assert!((base.c_inter - scaled.c_inter).abs() < 1e-12);
            prop_assert!((base.wc_intra - scaled.wc_intra).abs() < 1e-12);
        }

        #[test]
        fn stats_ignore_class_order(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(5, 3, &mut rng);
            let c = random(5, 3, &mut rng);
            let perm = [3usize, 0, 4, 1, 2];
            let base = angle_stats(&w, &c).unwrap();
            let permuted = angle_stats(&w.select_rows(&perm), &c.select_rows(&perm)).unwrap();
            prop_assert!((base.w_inter - permuted.w_inter).abs() < 1e-12);
            prop_assert!((base.c_inter - permuted.c_inter).abs() < 1e-12);
            prop_assert!((base.wc_intra - permuted.wc_intra).abs() < 1e-12);
        }

        #[test]
        fn confusion_symmetric_unit_diagonal(seed in 0u64..300, k in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(k, 5, &mut rng);
            let cm = confusion_matrix(&x).unwrap();
            for i in 0..k {
                prop_assert!((cm.entries[(i, i)] - 1.0).abs() < 1e-9);
                for j in 0..k {
                    prop_assert!((cm.entries[(i, j)] - cm.entries[(j, i)]).abs() < 1e-9);
                    prop_assert!(cm.entries[(i, j)].abs() <= 1.0 + 1e-12);
                }
            }
        }
    }
}

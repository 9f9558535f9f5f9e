//! Dense row-major matrices and the numerically guarded primitives the loss
//! heads are built from, plus a central-difference gradient oracle.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

use crate::scalar::Scalar;

/// Default clamp applied before `arccos`.
pub const DEFAULT_CLAMP_EPS: f64 = 1e-7;
/// Floor on row norms during L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("function value is not finite when perturbing entry ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Dense 2-D array stored in row-major order.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero; an empty-column matrix has no visible rows
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed rows into a new matrix, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn row_norms(&self) -> Vec<T> {
        self.iter_rows().map(norm).collect()
    }

    /// Largest absolute entry, zero for an empty matrix.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        let cols = self.cols.max(1);
        f.debug_list().entries(self.data.chunks(cols)).finish()
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy)]
enum Layout {
    Plain,
    Transposed,
}

fn gemm<T: Scalar>(
    op: &'static str,
    a: &Matrix<T>,
    la: Layout,
    b: &Matrix<T>,
    lb: Layout,
) -> Result<Matrix<T>, NumericsError> {
    let (m, ka, rsa, csa) = match la {
        Layout::Plain => (a.rows, a.cols, a.cols as isize, 1),
        Layout::Transposed => (a.cols, a.rows, 1, a.cols as isize),
    };
    let (kb, n, rsb, csb) = match lb {
        Layout::Plain => (b.rows, b.cols, b.cols as isize, 1),
        Layout::Transposed => (b.cols, b.rows, 1, b.cols as isize),
    };
    if ka != kb {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || ka == 0 {
        return Ok(out);
    }
    // SAFETY: strides describe the owned buffers of `a`, `b` and the freshly
    // allocated `out`, which aliases neither input.
    unsafe {
        T::gemm(
            m,
            ka,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// Standard matrix product `a * b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    gemm("matmul", a, Layout::Plain, b, Layout::Plain)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    gemm("matmul_nt", a, Layout::Plain, b, Layout::Transposed)
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    gemm("matmul_tn", a, Layout::Transposed, b, Layout::Plain)
}

/// Divides every row by `max(||row||, eps)`. Zero rows stay zero.
pub fn l2_normalize_rows<T: Scalar>(m: &Matrix<T>, eps: T) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let scale = norm(row).max(eps);
        row.iter_mut().for_each(|v| *v /= scale);
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(z: &Matrix<T>) -> Matrix<T> {
    let mut out = z.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Row-wise `log(sum(exp(row)))`, shifted by the row maximum.
pub fn log_sum_exp_rows<T: Scalar>(z: &Matrix<T>) -> Vec<T> {
    z.iter_rows()
        .map(|row| {
            let (arg, max) = row_max(row);
            max + tail_mass(row, arg, max).ln_1p()
        })
        .collect()
}

/// Index and value of the largest entry.
pub(crate) fn row_max<T: Scalar>(row: &[T]) -> (usize, T) {
    let mut arg = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[arg] {
            arg = j;
        }
    }
    (arg, row[arg])
}

/// `sum_{j != arg} exp(row_j - max)`; kept apart so `ln_1p` keeps tiny tails.
pub(crate) fn tail_mass<T: Scalar>(row: &[T], arg: usize, max: T) -> T {
    row.iter()
        .enumerate()
        .filter(|&(j, _)| j != arg)
        .fold(T::zero(), |acc, (_, &v)| acc + (v - max).exp())
}

#[inline]
fn clamp_cos<T: Scalar>(c: T, eps: T) -> T {
    let hi = T::one() - eps;
    // NaN compares false both ways and is pinned to the upper bound
    if c >= hi || c.is_nan() {
        hi
    } else if c <= -hi {
        -hi
    } else {
        c
    }
}

/// `arccos` of `c` clamped into `[-1 + eps, 1 - eps]`; always in `(0, pi)`.
#[inline]
pub fn safe_arccos<T: Scalar>(c: T, eps: T) -> T {
    clamp_cos(c, eps).acos()
}

/// Derivative of [`safe_arccos`] with respect to `c`; zero where the clamp is active.
#[inline]
pub fn safe_arccos_grad<T: Scalar>(c: T, eps: T) -> T {
    let hi = T::one() - eps;
    if c >= hi || c <= -hi {
        T::zero()
    } else {
        -T::one() / (T::one() - c * c).sqrt()
    }
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad<T, F>(f: F, at: &Matrix<T>, h: T) -> Result<Matrix<T>, NumericsError>
where
    T: Scalar,
    F: Fn(&Matrix<T>) -> T,
{
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows, at.cols);
    let two_h = h + h;
    for idx in 0..at.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + h;
        let plus = f(&probe);
        probe.data[idx] = orig - h;
        let minus = f(&probe);
        probe.data[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite {
                row: idx / at.cols.max(1),
                col: idx % at.cols.max(1),
            });
        }
        grad.data[idx] = (plus - minus) / two_h;
    }
    Ok(grad)
}

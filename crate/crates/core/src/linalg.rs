//! Dense row-major matrices and the softmax / log-sum-exp kernels everything
//! else is built on.
//!
//! All reductions run sequentially over the inner dimension so results are
//! reproducible bit for bit within a build.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

#[allow(unused_imports)] // unused only when std is in the build graph
use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point type the streaming kernels can run in.
pub trait Scalar: Float + core::fmt::Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// A dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
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
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        check_same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| f64::max(acc, (a - b).abs())))
    }
}

/// A matrix of token vectors: one row per token, one column per feature.
///
/// Every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(Matrix);

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::try_from(Matrix::new(rows, cols, data)?)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "from_rows",
                    left_rows: i,
                    left_cols: r.len(),
                    right_rows: 0,
                    right_cols: cols,
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Squared euclidean norm of row `i`.
    pub fn row_norm_sq(&self, i: usize) -> f64 {
        dot(self.row(i), self.row(i))
    }
}

impl TryFrom<Matrix> for TokenMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        if let Some(pos) = m.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / m.cols.max(1),
                col: pos % m.cols.max(1),
            });
        }
        Ok(Self(m))
    }
}

impl Deref for TokenMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op,
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    Ok(())
}

/// Sequential dot product.
#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Squared euclidean distance.
#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let t = x - y;
        acc += t * t;
    }
    acc
}

/// `a · bᵀ`: entry `(i, j)` is the dot product of row `i` of `a` with row `j` of `b`.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            op: "matmul_transposed",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

/// Numerically stable softmax of one row, in place. Returns `(max, sum)`
/// where `sum` is the denominator after subtracting `max`.
pub fn softmax_in_place(row: &mut [f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    (max, sum)
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(logits: &Matrix) -> Result<Matrix> {
    if let Some(pos) = logits.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / logits.cols.max(1),
            col: pos % logits.cols.max(1),
        });
    }
    let mut out = logits.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// `max + ln Σ exp(v - max)`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("log_sum_exp"));
    }
    if values.len() == 1 {
        return Ok(values[0]);
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Running state of a streaming softmax: the largest logit absorbed so far
/// and the normalizer relative to it.
///
/// The empty state is `max = -inf, normalizer = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxState<T> {
    pub max: T,
    pub normalizer: T,
}

impl<T: Float> SoftmaxState<T> {
    pub fn empty() -> Self {
        Self {
            max: T::neg_infinity(),
            normalizer: T::zero(),
        }
    }

    /// State for an already normalized partial result with log-sum-exp `lse`.
    pub fn seeded(lse: T) -> Self {
        if lse == T::neg_infinity() {
            Self::empty()
        } else {
            Self {
                max: lse,
                normalizer: T::one(),
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.normalizer == T::zero()
    }

    /// Absorb one logit with its value vector: rescale by
    /// `alpha = exp(m - m_new)`, then add `p = exp(logit - m_new)` times
    /// `contribution` into `acc`.
    #[inline]
    pub fn merge(&mut self, logit: T, contribution: &[T], acc: &mut [T]) {
        debug_assert_eq!(contribution.len(), acc.len());
        let m_new = if logit > self.max { logit } else { self.max };
        let alpha = (self.max - m_new).exp();
        let p = (logit - m_new).exp();
        self.normalizer = self.normalizer * alpha + p;
        for (a, &c) in acc.iter_mut().zip(contribution) {
            *a = *a * alpha + p * c;
        }
        self.max = m_new;
    }

    /// Log-sum-exp of everything absorbed; `-inf` for the empty state.
    pub fn lse(&self) -> T {
        if self.is_empty() {
            T::neg_infinity()
        } else {
            self.max + self.normalizer.ln()
        }
    }

    /// Divide the accumulator by the normalizer.
    pub fn finish(&self, acc: &mut [T]) {
        if self.is_empty() {
            return;
        }
        for a in acc.iter_mut() {
            *a = *a / self.normalizer;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let r = matmul_transposed(&m(1, 2, &[1.0, 0.0]), &m(1, 2, &[0.0, 1.0])).unwrap();
        assert_eq!(r.as_slice(), &[0.0]);
        let r = matmul_transposed(&m(1, 2, &[1.0, 2.0]), &m(1, 2, &[3.0, 4.0])).unwrap();
        assert_eq!(r.as_slice(), &[11.0]);
        let eye = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul_transposed(&eye, &eye).unwrap(), eye);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul_transposed(&Matrix::zeros(2, 3), &Matrix::zeros(4, 5)).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("2x3") && msg.contains("4x5"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let r = row_softmax(&m(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(r.as_slice(), &[0.5, 0.5]);
        let r = row_softmax(&m(1, 2, &[3f64.ln(), 0.0])).unwrap();
        assert_abs_diff_eq!(r.get(0, 0), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(r.get(0, 1), 0.25, epsilon = 1e-15);
        let r = row_softmax(&m(1, 2, &[1000.0, 1000.0])).unwrap();
        assert_eq!(r.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(row_softmax(&m(1, 2, &[f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn lse_examples() {
        assert_eq!(log_sum_exp(&[1.25]).unwrap(), 1.25);
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(log_sum_exp(&[-1e9, 0.0]).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[]), Err(Error::Empty("log_sum_exp")));
    }

    #[test]
    fn merge_at_current_max() {
        let mut st = SoftmaxState {
            max: 2.0,
            normalizer: 1.0,
        };
        let mut acc = [3.0];
        st.merge(2.0, &[5.0], &mut acc);
        assert_eq!(st.normalizer, 2.0);
        assert_eq!(acc, [8.0]);
    }

    #[test]
    fn merge_half_weight() {
        let mut st = SoftmaxState {
            max: 0.0,
            normalizer: 1.0,
        };
        let mut acc = [1.0, 2.0];
        st.merge(-(2f64.ln()), &[4.0, 8.0], &mut acc);
        assert_abs_diff_eq!(st.normalizer, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(acc[0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(acc[1], 6.0, epsilon = 1e-15);
        assert_eq!(st.max, 0.0);
    }

    #[test]
    fn sequential_merge_matches_softmax() {
        let (a, b) = (0.3, -1.7);
        let (va, vb) = ([1.0, -2.0], [0.5, 4.0]);
        let mut st = SoftmaxState::empty();
        let mut acc = [0.0; 2];
        st.merge(a, &va, &mut acc);
        st.merge(b, &vb, &mut acc);
        st.finish(&mut acc);
        let p = row_softmax(&m(1, 2, &[a, b])).unwrap();
        for t in 0..2 {
            let expect = p.get(0, 0) * va[t] + p.get(0, 1) * vb[t];
            assert_abs_diff_eq!(acc[t], expect, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(st.lse(), log_sum_exp(&[a, b]).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn token_matrix_rejects_non_finite() {
        let err = TokenMatrix::new(2, 2, alloc::vec![0.0, 1.0, f64::INFINITY, 0.0]).unwrap_err();
        assert_eq!(err, Error::NonFinite { row: 1, col: 0 });
        assert!(TokenMatrix::new(2, 2, alloc::vec![0.0; 3]).is_err());
    }
}

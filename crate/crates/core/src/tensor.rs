//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Everything here is a pure function of its inputs. The scalar type is
//! generic so the same forward pass can run in single or double precision.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point scalar usable by the kernels.
pub trait Real: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Runtime precision selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Copy of the listed columns, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }

    /// Copy of the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stack `self` on top of `below`.
    pub fn vstack(&self, below: &Self) -> Result<Self> {
        if self.cols != below.cols {
            return Err(Error::DimensionMismatch {
                op: "vstack",
                left: self.shape(),
                right: below.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&below.data);
        Ok(Self {
            rows: self.rows + below.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        matmul(self, rhs)
    }
}

/// `a · b`, using an i-k-j loop order so the inner loop streams rows of `b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Additive attention mask: each entry is either `0` (attend) or `-inf` (blocked).
///
/// Stored as a boolean "allowed" grid. Construction rejects any row with no
/// allowed entry, so a softmax over a valid mask is always well defined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdditiveMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AdditiveMask {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self::from_allowed(rows, cols, allowed)
    }

    pub fn from_allowed(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "mask",
                left: (rows, cols),
                right: (allowed.len(), 1),
            });
        }
        for i in 0..rows {
            if !allowed[i * cols..(i + 1) * cols].iter().any(|&a| a) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        Ok(Self { rows, cols, allowed })
    }

    /// Build from literal additive values (`0.0` or `f64::NEG_INFINITY`).
    pub fn from_additive(rows: usize, cols: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "mask",
                left: (rows, cols),
                right: (entries.len(), 1),
            });
        }
        let mut allowed = Vec::with_capacity(entries.len());
        for (idx, &v) in entries.iter().enumerate() {
            if v == 0.0 {
                allowed.push(true);
            } else if v == f64::NEG_INFINITY {
                allowed.push(false);
            } else {
                return Err(Error::InvalidMaskEntry {
                    row: idx / cols.max(1),
                    col: idx % cols.max(1),
                    value: v,
                });
            }
        }
        Self::from_allowed(rows, cols, allowed)
    }

    pub fn allow_all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// The additive value at `(i, j)`.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        if self.is_allowed(i, j) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Row-wise softmax of `scores + mask`, stabilized by the per-row max over
/// unmasked entries. Masked positions come out as exactly zero.
pub fn masked_softmax<T: Real>(scores: &Matrix<T>, mask: &AdditiveMask) -> Result<Matrix<T>> {
    if scores.shape() != mask.shape() {
        return Err(Error::DimensionMismatch {
            op: "masked_softmax",
            left: scores.shape(),
            right: mask.shape(),
        });
    }
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let row = scores.row(i);
        let mut max = T::neg_infinity();
        for (j, &s) in row.iter().enumerate() {
            if mask.is_allowed(i, j) && s > max {
                max = s;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let out_row = out.row_mut(i);
        let mut sum = T::zero();
        for (j, &s) in row.iter().enumerate() {
            if mask.is_allowed(i, j) {
                let e = (s - max).exp();
                out_row[j] = e;
                sum = sum + e;
            }
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// SiLU, `x · sigmoid(x)`.
pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Divide each row by its root-mean-square (no learned gain).
pub fn rms_normalize<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let eps = T::from_f64(1e-6);
    let n = T::from_f64(m.cols as f64);
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = out.row_mut(i);
        let ms = row.iter().map(|&x| x * x).sum::<T>() / n;
        let inv = T::one() / (ms + eps).sqrt();
        for x in row.iter_mut() {
            *x = *x * inv;
        }
    }
    out
}

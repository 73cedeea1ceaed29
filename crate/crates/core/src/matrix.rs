//! Dense row-major `f64` matrices.
//!
//! Every weight in the crate lives in a [`Matrix`]. Vectors are `d x 1`
//! matrices; the hot evaluation paths work on plain slices internally.
//! Decompositions (SVD, LU) are delegated to `nalgebra`.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition numbers at or above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// A dense, finite, row-major real matrix with at least one row and column.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix);
        }
        if data.len() != rows * cols {
            return Err(Error::EntryCount {
                rows,
                cols,
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
                value: data[pos],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyMatrix)?.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * first);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != first {
                return Err(Error::RaggedRows {
                    row: i,
                    expected: first,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), first, data)
    }

    /// A `len x 1` column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix entry by entry. Panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("from_fn produced an invalid matrix")
    }

    /// Entries drawn i.i.d. from the standard normal distribution, row by row.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
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
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// Row-major entries.
    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }

    /// `self * x` for a slice of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "cannot apply {}x{} matrix to a vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(self.matvec_unchecked(x))
    }

    #[inline]
    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn zip_with(&self, rhs: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimensionMismatch(format!(
                "cannot {op} {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "subtract", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rows at `indices`, in the given order. Panics on an out-of-range index.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        assert!(!indices.is_empty(), "row selection must be nonempty");
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns at `indices`, in the given order. Panics on an out-of-range index.
    pub fn select_cols(&self, indices: &[usize]) -> Matrix {
        assert!(!indices.is_empty(), "column selection must be nonempty");
        Self::from_fn(self.rows, indices.len(), |i, j| self.get(i, indices[j]))
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Result<Matrix> {
        Matrix::from_fn_checked(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    fn from_fn_checked(
        rows: usize,
        cols: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data)
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut sv: Vec<f64> = self
            .to_nalgebra()
            .singular_values()
            .iter()
            .copied()
            .collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    fn default_rank_tolerance(&self, sigma_max: f64) -> f64 {
        self.rows.max(self.cols) as f64 * f64::EPSILON * sigma_max
    }

    /// Numerical rank: singular values above `max(rows, cols) * eps * sigma_max`.
    pub fn rank(&self) -> usize {
        let sv = self.singular_values();
        let cutoff = self.default_rank_tolerance(sv[0]);
        sv.iter().filter(|&&s| s > cutoff).count()
    }

    /// `sigma_max / sigma_min`, infinite when the smallest singular value is zero.
    pub fn condition_number(&self) -> f64 {
        let sv = self.singular_values();
        let smin = *sv.last().expect("nonempty");
        if smin == 0.0 {
            f64::INFINITY
        } else {
            sv[0] / smin
        }
    }

    /// Moore-Penrose pseudo-inverse.
    pub fn pseudo_inverse(&self) -> Result<Matrix> {
        let a = self.to_nalgebra();
        let sigma_max = self.singular_values()[0];
        let eps = self.default_rank_tolerance(sigma_max);
        let pinv = a
            .svd(true, true)
            .pseudo_inverse(eps)
            .map_err(|e| Error::Internal(e.to_string()))?;
        Matrix::from_nalgebra(&pinv)
    }

    /// Inverse of a square matrix whose condition number is below [`MAX_CONDITION`].
    pub fn inverse(&self, what: &'static str) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "{what} must be square, got {}x{}",
                self.rows, self.cols
            )));
        }
        let condition = self.condition_number();
        if condition.is_nan() || condition >= MAX_CONDITION {
            return Err(Error::IllConditioned { what, condition });
        }
        let inv = self
            .to_nalgebra()
            .try_inverse()
            .ok_or(Error::IllConditioned { what, condition })?;
        Matrix::from_nalgebra(&inv)
    }
}

/// Minimum-norm least-squares solution `X` of `a X ~= b`, via SVD.
///
/// Singular values at or below `max(rows, cols) * eps * sigma_max` are
/// dropped, so rank-deficient systems still get the minimum-norm answer.
pub fn lstsq_min_norm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "least squares needs matching row counts, got {} and {}",
            a.rows, b.rows
        )));
    }
    let sigma_max = a.singular_values()[0];
    if sigma_max == 0.0 {
        return Ok(Matrix::zeros(a.cols, b.cols));
    }
    let eps = a.default_rank_tolerance(sigma_max);
    let x = a
        .to_nalgebra()
        .svd(true, true)
        .solve(&b.to_nalgebra(), eps)
        .map_err(|e| Error::Internal(e.to_string()))?;
    Matrix::from_nalgebra(&x)
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols)).finish()
    }
}

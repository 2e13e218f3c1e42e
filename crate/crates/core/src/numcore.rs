//! Dense vector/matrix primitives and numerically stable reductions.
//!
//! Everything is plain `f64` in row-major `Vec`s. Vectors are `&[f64]`
//! slices; [`Matrix`] is a shape-checked rectangular array. No BLAS, no
//! sparsity — the workloads here are small batches where verifiability
//! matters more than throughput.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero (rejecting cosine on them).
pub const NORM_EPS: f64 = 1e-12;

/// Row-major rectangular array of `f64`. Shape is fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Wire shape for [`Matrix`]: `{rows, cols, data}` with `data` row-major.
#[derive(Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = String;

    fn try_from(raw: MatrixRepr) -> std::result::Result<Self, String> {
        if raw.rows * raw.cols != raw.data.len() {
            return Err(format!(
                "matrix shape {}x{} does not match {} stored entries",
                raw.rows,
                raw.cols,
                raw.data.len()
            ));
        }
        Ok(Matrix {
            rows: raw.rows,
            cols: raw.cols,
            data: raw.data,
        })
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from explicit row vectors; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Wraps a row-major buffer of exactly `rows * cols` entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `y = A x` for `A: rows x cols`, `x: cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(self.row(i), x);
        }
        y
    }

    /// `y = A^T x` for `A: rows x cols`, `x: rows`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += self.data[i * self.cols + j] * xi;
            }
        }
        y
    }

    /// `self += s * u v^T` (rank-one accumulate).
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], s: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let c = s * ui;
            if c == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (rj, &vj) in row.iter_mut().zip(v) {
                *rj += c * vj;
            }
        }
    }

    /// `self += s * other` (same shape).
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `a.b / (|a||b|)`.
///
/// Errors with [`Error::ZeroNormVector`] when either norm is at or below
/// [`NORM_EPS`], and [`Error::DimensionMismatch`] on unequal lengths.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::ZeroNormVector { row: None });
    }
    Ok(dot(a, b) / (na * nb))
}

/// All-pairs cosine similarity over the rows of an `M x D` batch.
///
/// The result is exactly symmetric (the upper triangle is computed once and
/// mirrored). Errors carry the index of the first zero-norm row.
pub fn pairwise_cosine(batch: &Matrix) -> Result<Matrix> {
    let m = batch.rows();
    let norms = row_norms(batch)?;
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        out.set(i, i, dot(batch.row(i), batch.row(i)) / (norms[i] * norms[i]));
        for j in (i + 1)..m {
            let s = dot(batch.row(i), batch.row(j)) / (norms[i] * norms[j]);
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(out)
}

/// Per-row norms, rejecting rows at or below [`NORM_EPS`].
pub fn row_norms(batch: &Matrix) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(batch.rows());
    for i in 0..batch.rows() {
        let n = norm(batch.row(i));
        if n <= NORM_EPS {
            return Err(Error::ZeroNormVector { row: Some(i) });
        }
        norms.push(n);
    }
    Ok(norms)
}

/// `log(sum_i exp(v_i))` via max-subtraction, so large inputs cannot
/// overflow. Exact at the boundary cases: constant inputs give
/// `max + ln(n)`, a singleton gives itself.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySequence);
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

//! Dense matrices, batch statistics and the small set of numerically careful
//! kernels (whitening, cosine similarity, log-softmax) shared by every other
//! module.
//!
//! Everything here is a pure function over immutable inputs and works in
//! double precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to every per-dimension standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Row-major `rows x cols` matrix of `f64`.
///
/// Rows index the batch, columns the feature dimension. Scalars inside the
/// gradient tape are represented as `1 x 1` matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::mismatch(
                "matrix construction",
                "at least 1x1",
                format!("{rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::mismatch(
                "matrix construction",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::mismatch(
                    format!("row {i}"),
                    format!("{d} columns"),
                    format!("{} columns", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(n, d, data)
    }

    /// Builds a single-row matrix.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Value of a `1 x 1` matrix.
    pub fn scalar_value(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Gathers the given rows into a new matrix.
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped matrices.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "elementwise op")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Combines every row with a `1 x cols` row vector.
    pub fn zip_row(&self, row: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::mismatch(
                "row broadcast",
                format!("1x{}", self.cols),
                row.shape_str(),
            ));
        }
        let mut out = self.clone();
        for r in out.data.chunks_exact_mut(self.cols) {
            for (v, &b) in r.iter_mut().zip(&row.data) {
                *v = f(*v, b);
            }
        }
        Ok(out)
    }

    pub fn expect_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(
                context,
                self.shape_str(),
                other.shape_str(),
            ));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::mismatch(
                "matmul",
                format!("{} rows on the right", self.cols),
                other.shape_str(),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::mismatch(
                "column concatenation",
                format!("{} rows", self.rows),
                format!("{} rows", other.rows),
            ));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Per-column sums as a `1 x cols` row.
    pub fn col_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in self.iter_rows() {
            for (o, &v) in out.data.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Per-dimension batch statistics of a feature batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Mean of `sigma` over dimensions.
    pub sigma_scalar: f64,
}

impl BatchStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu_row(&self) -> FeatureMatrix {
        FeatureMatrix {
            rows: 1,
            cols: self.mu.len(),
            data: self.mu.clone(),
        }
    }

    pub fn sigma_row(&self) -> FeatureMatrix {
        FeatureMatrix {
            rows: 1,
            cols: self.sigma.len(),
            data: self.sigma.clone(),
        }
    }
}

/// Population mean and standard deviation of each column, with the standard
/// deviation floored at [`SIGMA_FLOOR`].
pub fn compute_stats(batch: &FeatureMatrix) -> Result<BatchStats> {
    if batch.rows() < 2 {
        return Err(Error::DegenerateBatch { rows: batch.rows() });
    }
    batch.ensure_finite("batch statistics")?;
    let n = batch.rows() as f64;
    let mu: Vec<f64> = batch.col_sums().data.iter().map(|s| s / n).collect();
    let mut var = vec![0.0; batch.cols()];
    for row in batch.iter_rows() {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mu) {
            let d = x - m;
            *v += d * d;
        }
    }
    let sigma: Vec<f64> = var
        .iter()
        .map(|v| (v / n).sqrt().max(SIGMA_FLOOR))
        .collect();
    let sigma_scalar = sigma.iter().sum::<f64>() / sigma.len() as f64;
    Ok(BatchStats {
        mu,
        sigma,
        sigma_scalar,
    })
}

/// `(batch - mu) / sigma`, per dimension.
pub fn whiten(batch: &FeatureMatrix, stats: &BatchStats) -> Result<FeatureMatrix> {
    if stats.dim() != batch.cols() || stats.sigma.len() != batch.cols() {
        return Err(Error::mismatch(
            "whiten",
            format!("statistics over {} dims", batch.cols()),
            format!("{} dims", stats.dim()),
        ));
    }
    let mut out = batch.clone();
    for row in out.data.chunks_exact_mut(batch.cols()) {
        for ((x, &m), &s) in row.iter_mut().zip(&stats.mu).zip(&stats.sigma) {
            *x = (*x - m) / s;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `a.b / (|a||b|)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch(
            "cosine similarity",
            format!("length {}", a.len()),
            format!("length {}", b.len()),
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm {
            context: "cosine similarity".into(),
        });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Max-shifted log-sum-exp.
pub fn logsumexp(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// `scores[j] - logsumexp(scores)`.
pub fn log_softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "log-softmax scores".into(),
        });
    }
    let lse = logsumexp(scores);
    Ok(scores.iter().map(|s| s - lse).collect())
}

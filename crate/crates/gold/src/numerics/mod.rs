//! Dense matrix kernels, a reverse-mode differentiation tape over a fixed
//! op vocabulary, and the Adam optimiser. Everything downstream (GCN,
//! detector, generators, losses) is built from these pieces.
//!
//! All storage is row-major `f64`. The tape records a closed set of
//! primitive ops during the forward pass and replays them in reverse for
//! gradients, so every backward rule is auditable in one place.

mod tape;
mod optim;

pub use optim::{adam_step, grad_check, AdamParams, ParamStore};
pub use tape::{Gradients, NodeId, Tape};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::dimension(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    /// Column vector from a flat slice.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self @ other`, cache-friendly i-k-j loop order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dimension(format!(
                "matmul shape mismatch: {}x{} @ {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(Error::dimension(format!(
                "elementwise shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
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

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum_all() / self.data.len() as f64
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// FNV-1a over the raw bit pattern. Stable across runs, used for the
    /// frozen-parameter assertions and checkpoint integrity.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for &dim in &[self.rows as u64, self.cols as u64] {
            for b in dim.to_le_bytes() {
                eat(b);
            }
        }
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                eat(b);
            }
        }
        h
    }

    /// Glorot-uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.gen_range(-a..a);
        }
        m
    }

    pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        let dist = rand_distr::StandardNormal;
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.sample(dist);
        }
        m
    }
}

/// Row-wise log-sum-exp, max-shifted so entries up to +-1e6 stay finite.
/// Returns an n x 1 column.
pub fn logsumexp_rows(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::dimension("logsumexp_rows on empty matrix"));
    }
    let mut out = Matrix::zeros(m.rows(), 1);
    for i in 0..m.rows() {
        out.data[i] = logsumexp_slice(m.row(i));
    }
    Ok(out)
}

pub(crate) fn logsumexp_slice(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise softmax, max-shifted.
pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let lse = logsumexp_slice(m.row(i));
        let row = &mut out.data[i * m.cols()..(i + 1) * m.cols()];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_uniform_row() {
        let m = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let out = logsumexp_rows(&m).unwrap();
        assert!((out.get(0, 0) - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_no_overflow() {
        let m = Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let out = logsumexp_rows(&m).unwrap();
        assert!(out.get(0, 0).is_finite());
        assert!((out.get(0, 0) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_three_entries() {
        // Direct high-precision evaluation of log(e^1 + e^2 + e^3).
        let m = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let out = logsumexp_rows(&m).unwrap();
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((out.get(0, 0) - expected).abs() < 1e-12);
        assert!((out.get(0, 0) - 3.40760596444438).abs() < 1e-5);
    }

    #[test]
    fn logsumexp_empty_is_dimension_error() {
        let m = Matrix::zeros(0, 3);
        assert!(matches!(
            logsumexp_rows(&m),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn logsumexp_shift_invariance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = Matrix::standard_normal(4, 5, &mut rng);
            let c: f64 = rng.gen_range(-3.0..3.0);
            let shifted = m.map(|v| v + c);
            let a = logsumexp_rows(&m).unwrap();
            let b = logsumexp_rows(&shifted).unwrap();
            for i in 0..4 {
                assert!((b.get(i, 0) - a.get(i, 0) - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn fingerprint_distinguishes_values() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.set(0, 1, 2.0 + 1e-15);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}

//! Dense row-major linear algebra over `f64`, the activations used by the
//! recurrent cell, a stable softmax and a seeded generator for parameter
//! initialization.
//!
//! Vectors are treated as row vectors throughout: a layer computes `x · W`
//! with `W` of shape `(d_in, d_out)`.

use std::fmt;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Default)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector {
            data: vec![value; len],
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_len("dot", self.len(), other.len())?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        check_len("add", self.len(), other.len())?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        check_len("sub", self.len(), other.len())?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        self.iter().map(|a| a * s).collect()
    }

    /// `self += other`, panicking on length mismatch (internal hot path).
    pub(crate) fn add_assign(&mut self, other: &[f64]) {
        assert_eq!(self.len(), other.len(), "add_assign length mismatch");
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Vector {
            data: data.to_vec(),
        }
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector {
            data: iter.into_iter().collect(),
        }
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.iter()).finish()
    }
}

#[derive(Clone, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// Row vector times matrix: `x · self`.
    pub fn vecmat(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.rows {
            return Err(Error::shape(
                "vecmat",
                format!("1x{}", x.len()),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
        Ok(out.into())
    }

    /// Matrix times column vector: `self · y`. This is the backward map of
    /// [`Matrix::vecmat`]: if `out = x · W` then `dx = W · dout`.
    pub fn matvec(&self, y: &[f64]) -> Result<Vector> {
        if y.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x1", y.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(y).map(|(w, v)| w * v).sum())
            .collect())
    }

    /// `self += xᵀ · y`, the weight gradient of `out = x · W`.
    pub fn add_outer(&mut self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.rows || y.len() != self.cols {
            return Err(Error::shape(
                "add_outer",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", x.len(), y.len()),
            ));
        }
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let cols = self.cols;
            for (g, v) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(y) {
                *g += xr * v;
            }
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("len {a}"), format!("len {b}")));
    }
    Ok(())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vector> {
    check_len("hadamard", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &[f64]) -> Vector {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn tanh(x: &[f64]) -> Vector {
    x.iter().map(|v| v.tanh()).collect()
}

/// Softmax with max-subtraction; shift invariant and overflow free.
pub fn softmax(y: &[f64]) -> Vector {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Natural log of softmax, computed as `y - max - ln Σ exp(y - max)`.
pub fn log_softmax(y: &[f64]) -> Vector {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = y.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    y.iter().map(|v| v - max - lse).collect()
}

/// SplitMix64 generator.
///
/// The state advances by the golden-gamma constant `0x9E3779B97F4A7C15` and
/// each output is the state passed through the SplitMix64 finalizer. Output
/// depends only on the seed, so streams are identical on every platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn init_uniform(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Param(format!(
            "init scale must be positive and finite, got {scale}"
        )));
    }
    let data = (0..rows * cols)
        .map(|_| rng.uniform(-scale, scale))
        .collect();
    Ok(Matrix { rows, cols, data })
}

pub fn init_uniform_vector(rng: &mut Rng, len: usize, scale: f64) -> Result<Vector> {
    Ok(init_uniform(rng, 1, len, scale)?.data.into())
}

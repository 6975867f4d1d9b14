// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f64` kernels: row-major matrices, dot products, softmax, layer norm
//! and a seeded random stream.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Every kernel that combines two
//! operands checks their shapes and returns [`Error::Shape`] on mismatch.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor added inside [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    #[must_use]
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[must_use]
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data.
    ///
    /// # Errors
    ///
    /// [`Error::Shape`] if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Fill with `scale * N(0, 1)` draws, row by row.
    pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| scale * rng.gaussian()).collect();
        Self { rows, cols, data }
    }

    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[must_use]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[must_use]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[must_use]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[must_use]
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    #[must_use]
    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.data.chunks(m.cols.max(1)).map(<[f64]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = String;

    fn try_from(rows: Vec<Vec<f64>>) -> std::result::Result<Self, Self::Error> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n_cols {
                return Err(format!("row {i} has {} columns, expected {n_cols}", row.len()));
            }
            data.extend(row);
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }
}

/// `M x`.
///
/// # Errors
///
/// [`Error::Shape`] when `x.len() != m.cols()`.
pub fn matvec(m: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m.rows];
    matvec_into(m, x, &mut out)?;
    Ok(out)
}

/// `out = M x`, reusing the caller's buffer.
///
/// # Errors
///
/// [`Error::Shape`] when `x` or `out` disagree with `m`.
pub fn matvec_into(m: &Matrix, x: &[f64], out: &mut [f64]) -> Result<()> {
    if x.len() != m.cols {
        return Err(Error::Shape {
            op: "matvec",
            expected: m.cols,
            got: x.len(),
        });
    }
    if out.len() != m.rows {
        return Err(Error::Shape {
            op: "matvec(out)",
            expected: m.rows,
            got: out.len(),
        });
    }
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(m.cols.max(1))) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    Ok(())
}

/// `Mᵀ y`, without materializing the transpose.
///
/// # Errors
///
/// [`Error::Shape`] when `y.len() != m.rows()`.
pub fn matvec_transposed(m: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != m.rows {
        return Err(Error::Shape {
            op: "matvec_transposed",
            expected: m.rows,
            got: y.len(),
        });
    }
    let mut out = vec![0.0; m.cols];
    for (row, &coef) in m.data.chunks_exact(m.cols.max(1)).zip(y) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += coef * a;
        }
    }
    Ok(out)
}

/// `Σ aᵢ bᵢ`.
///
/// # Errors
///
/// [`Error::Shape`] on length mismatch.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "dot",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[must_use]
pub fn norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// `y += alpha * x`.
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax (max-shifted).
///
/// # Errors
///
/// [`Error::Empty`] for an empty slice, [`Error::NonFinite`] if any entry is NaN or infinite.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

/// In-place variant of [`softmax`].
///
/// # Errors
///
/// Same as [`softmax`].
pub fn softmax_in_place(v: &mut [f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Layer norm without bias: `gain ⊙ (x − mean) / sqrt(var + 1e-5)`.
///
/// # Errors
///
/// [`Error::Shape`] if `gain` and `x` differ in length, [`Error::Empty`] for empty input.
pub fn layer_norm(x: &[f64], gain: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gain, &mut out)?;
    Ok(out)
}

/// [`layer_norm`] into a caller-provided buffer.
///
/// # Errors
///
/// Same as [`layer_norm`].
pub fn layer_norm_into(x: &[f64], gain: &[f64], out: &mut [f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Empty("layer_norm"));
    }
    if gain.len() != x.len() || out.len() != x.len() {
        return Err(Error::Shape {
            op: "layer_norm",
            expected: x.len(),
            got: if gain.len() == x.len() { out.len() } else { gain.len() },
        });
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * (v - mean) * inv;
    }
    Ok(())
}

/// Deterministic random stream.
///
/// Backed by ChaCha8 seeded through `SeedableRng::seed_from_u64`, whose
/// seed expansion (PCG32) and output are fixed by the `rand_chacha` crate
/// and identical on every platform. Uniforms take the top 53 bits of a
/// `u64`; Gaussians use the Box–Muller transform and cache the second draw.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    #[must_use]
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire-free modulo; bias is < n / 2^64 and irrelevant at these sizes.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = std::f64::consts::TAU * u2;
        self.spare = Some(r * phi.sin());
        r * phi.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `n` standard normal draws from `rng`.
pub fn seeded_gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gaussian()).collect()
}

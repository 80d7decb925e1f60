//! Dense numerical kernel: tensors, matrix products, activations, losses,
//! and the finite-difference harness used to validate every hand-derived
//! gradient in the crate.
//!
//! Everything is 64-bit and row-major. Operations are pure; none touch
//! global state, so values can move freely between threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                shape: shape.clone(),
                reason: format!("data length {} does not match", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn random_normal(shape: Vec<usize>, std: f64, rng: &mut crate::rng::Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.normal_scaled(std)).collect();
        Tensor { shape, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            assert_eq!(row.len(), n_cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![n_rows, n_cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when interpreted as a matrix (1-D tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when interpreted as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[self.shape.len() - 1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    /// Standard matrix product; inner dimensions must agree.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        gemm_nn(m, k, n, &self.data, &other.data, &mut out.data);
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// GEMM wrappers (row-major). matrixmultiply supplies the packed SIMD kernel;
// these helpers pin the stride bookkeeping in one place.
// ---------------------------------------------------------------------------

/// out = a(m×k) · b(k×n)
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// out = a(m×k) · b(n×k)ᵀ
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            0.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// out += a(k×m)ᵀ · b(k×n)
pub fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Numerically stable in-place softmax over one row.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = out.cols();
    for row in out.data.chunks_mut(cols) {
        softmax_inplace(row);
    }
    out
}

/// Backward through a row softmax: ds = p ⊙ (dp − ⟨dp, p⟩).
pub fn softmax_backward_row(probs: &[f64], d_probs: &[f64], d_scores: &mut [f64]) {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, d)| p * d).sum();
    for ((ds, &p), &dp) in d_scores.iter_mut().zip(probs).zip(d_probs) {
        *ds = p * (dp - dot);
    }
}

// ---------------------------------------------------------------------------
// Layer normalization (population variance over the last axis)
// ---------------------------------------------------------------------------

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    /// x̂ per row, before the affine map.
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_forward(
    x: &Tensor,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Tensor, LayerNormCache) {
    let d = x.cols();
    assert_eq!(gain.len(), d, "gain length");
    assert_eq!(bias.len(), d, "bias length");
    let rows = x.rows();
    let mut out = Tensor::zeros(x.shape.clone());
    let mut normalized = Tensor::zeros(x.shape.clone());
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let nhat = &mut normalized.data[r * d..(r + 1) * d];
        let orow = &mut out.data[r * d..(r + 1) * d];
        for i in 0..d {
            nhat[i] = (row[i] - mean) * istd;
            orow[i] = gain[i] * nhat[i] + bias[i];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

/// Normalize over the last axis, then apply gain ⊙ x̂ + bias.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Tensor {
    layer_norm_forward(x, gain, bias, eps).0
}

/// Returns (dx, dgain, dbias).
pub fn layer_norm_backward(
    d_out: &Tensor,
    cache: &LayerNormCache,
    gain: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = d_out.cols();
    let rows = d_out.rows();
    let mut dx = Tensor::zeros(d_out.shape.clone());
    let mut d_gain = vec![0.0; d];
    let mut d_bias = vec![0.0; d];
    for r in 0..rows {
        let dy = &d_out.data[r * d..(r + 1) * d];
        let nhat = &cache.normalized.data[r * d..(r + 1) * d];
        let istd = cache.inv_std[r];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_nhat = 0.0;
        for i in 0..d {
            d_gain[i] += dy[i] * nhat[i];
            d_bias[i] += dy[i];
            let dxhat = dy[i] * gain[i];
            mean_dxhat += dxhat;
            mean_dxhat_nhat += dxhat * nhat[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_nhat /= d as f64;
        let dxr = &mut dx.data[r * d..(r + 1) * d];
        for i in 0..d {
            let dxhat = dy[i] * gain[i];
            dxr[i] = istd * (dxhat - mean_dxhat - nhat[i] * mean_dxhat_nhat);
        }
    }
    (dx, d_gain, d_bias)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

const GELU_COEF: f64 = 0.044715;

/// GELU, tanh approximation (smooth, so finite differences stay tight).
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Probability floor applied before the log in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// −ln(probs[gold]), with probs clamped at 1e-12 before the log.
pub fn cross_entropy(probs: &[f64], gold: usize) -> Result<f64, TensorError> {
    if gold >= probs.len() {
        return Err(TensorError::IndexOutOfRange {
            index: gold,
            len: probs.len(),
        });
    }
    Ok(-probs[gold].max(PROB_FLOOR).ln())
}

// ---------------------------------------------------------------------------
// Inverted dropout
// ---------------------------------------------------------------------------

/// Keep-mask with survivors pre-scaled by 1/(1−rate). Rate 0 yields all ones.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep_scale = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep_scale })
        .collect()
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Max over parameters of |analytic − numeric| / max(1, |analytic|, |numeric|),
/// with the numeric gradient from central differences at the given step.
pub fn grad_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let chunk = 256;
    let indices: Vec<usize> = (0..point.len()).collect();
    indices
        .par_chunks(chunk)
        .map(|idxs| {
            let mut buf = point.to_vec();
            let mut worst = 0.0f64;
            for &i in idxs {
                let orig = buf[i];
                buf[i] = orig + step;
                let up = f(&buf);
                buf[i] = orig - step;
                let down = f(&buf);
                buf[i] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic[i];
                let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
                worst = worst.max(err);
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

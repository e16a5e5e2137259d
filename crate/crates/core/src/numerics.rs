//! Dense f64 kernels: tensors, matmul, stable softmax, RoPE, RMSNorm,
//! Shannon entropy and symmetric int8 quantization.
//!
//! Every reduction runs in ascending index order so results are
//! reproducible bit-for-bit across runs.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(LabError::domain(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(LabError::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LabError::domain("tensor contains non-finite values"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d >= 1),
            "tensor dimensions must be >= 1"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(LabError::domain("ragged rows"));
        }
        Self::new(vec![m, n], rows.concat())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a 2-D tensor (or 1 for vectors).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(LabError::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Ascending-order dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `c = a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul")?;
    let (k2, n) = b.expect_matrix("matmul")?;
    if k != k2 {
        return Err(LabError::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * b.data[t * n + j];
            }
            *o = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `y = W x` where `w` is `[out × in]` stored row-major.
#[inline]
pub fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let inp = x.len();
    debug_assert_eq!(w.len(), inp * out.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(inp)) {
        *o = dot(row, x);
    }
}

/// `out += Wᵀ g` for `w: [out × in]`, `g: [out]`, `out: [in]`.
#[inline]
pub fn matvec_t_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let inp = out.len();
    for (gi, row) in g.iter().zip(w.chunks_exact(inp)) {
        if *gi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(row) {
            *o += gi * wv;
        }
    }
}

/// `dw += g xᵀ` (outer-product accumulation for a `[out × in]` weight).
#[inline]
pub fn outer_acc(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let inp = x.len();
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(inp)) {
        if *gi == 0.0 {
            continue;
        }
        for (d, xv) in row.iter_mut().zip(x) {
            *d += gi * xv;
        }
    }
}

/// In-place numerically stable softmax over a non-empty slice.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(LabError::domain("softmax of an empty vector"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(LabError::domain("softmax input must be finite"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Tolerance on the total mass of a probability vector.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Shannon entropy in nats; zero-mass terms contribute nothing.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(LabError::domain("entropy of an empty distribution"));
    }
    let mut total = 0.0;
    for &x in p {
        if !x.is_finite() || x < 0.0 {
            return Err(LabError::domain(format!("invalid probability mass {x}")));
        }
        total += x;
    }
    if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(LabError::domain(format!(
            "distribution sums to {total}, expected 1"
        )));
    }
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    // cancellation can leave tiny negatives on one-hot inputs
    Ok(h.max(0.0))
}

/// Rotary embedding over adjacent pairs `(2i, 2i+1)` at a real-valued position.
pub fn rope_rotate_at(x: &[f64], position: f64, theta_base: f64) -> Result<Vec<f64>> {
    if x.len() % 2 != 0 {
        return Err(LabError::config(format!(
            "rotary embedding needs an even dimension, got {}",
            x.len()
        )));
    }
    let mut out = x.to_vec();
    rope_in_place(&mut out, position, theta_base, 1.0);
    Ok(out)
}

pub fn rope_rotate(x: &[f64], position: usize, theta_base: f64) -> Result<Vec<f64>> {
    rope_rotate_at(x, position as f64, theta_base)
}

/// Rotates the leading even-length prefix of `x` in place. `direction = -1.0`
/// applies the inverse rotation (used by backprop).
pub fn rope_in_place(x: &mut [f64], position: f64, theta_base: f64, direction: f64) {
    let d = x.len() - x.len() % 2;
    if d == 0 || position == 0.0 {
        return;
    }
    for i in 0..d / 2 {
        let freq = theta_base.powf(-(2.0 * i as f64) / d as f64);
        let angle = direction * position * freq;
        let (s, c) = angle.sin_cos();
        let a = x[2 * i];
        let b = x[2 * i + 1];
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

/// Precomputed cos/sin tables for a fixed head dimension.
#[derive(Debug, Clone)]
pub struct RopeTable {
    dim: usize,
    inv_freq: Vec<f64>,
}

impl RopeTable {
    pub fn new(dim: usize, theta_base: f64) -> Self {
        let d = dim - dim % 2;
        let inv_freq = (0..d / 2)
            .map(|i| theta_base.powf(-(2.0 * i as f64) / d as f64))
            .collect();
        Self { dim, inv_freq }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply(&self, x: &mut [f64], position: usize, direction: f64) {
        if position == 0 {
            return;
        }
        let p = position as f64;
        for (i, f) in self.inv_freq.iter().enumerate() {
            let (s, c) = (direction * p * f).sin_cos();
            let a = x[2 * i];
            let b = x[2 * i + 1];
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }
}

pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() || x.len() != gain.len() {
        return Err(LabError::Dimension {
            op: "rmsnorm",
            left: vec![x.len()],
            right: vec![gain.len()],
        });
    }
    if !(eps > 0.0) {
        return Err(LabError::domain("rmsnorm eps must be positive"));
    }
    let mut out = vec![0.0; x.len()];
    rmsnorm_into(x, gain, eps, &mut out);
    Ok(out)
}

/// Writes the normalized vector into `out` and returns `1/rms`.
#[inline]
pub fn rmsnorm_into(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, xv), g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * xv * inv;
    }
    inv
}

/// Symmetric per-vector 8-bit code: `value ≈ scale · code`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedVector {
    pub scale: f64,
    pub codes: Vec<i8>,
}

impl QuantizedVector {
    pub fn dim(&self) -> usize {
        self.codes.len()
    }

    /// Dot product of a full-precision vector with the dequantized codes.
    pub fn dot(&self, q: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (x, &c) in q.iter().zip(&self.codes) {
            acc += x * c as f64;
        }
        acc * self.scale
    }
}

pub fn quantize8(v: &[f64]) -> QuantizedVector {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return QuantizedVector {
            scale: 1.0,
            codes: vec![0; v.len()],
        };
    }
    let scale = max / 127.0;
    let codes = v
        .iter()
        .map(|x| (x / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedVector { scale, codes }
}

pub fn dequantize8(q: &QuantizedVector) -> Vec<f64> {
    q.codes.iter().map(|&c| c as f64 * q.scale).collect()
}

/// Round-half-up, used wherever a real count becomes an integer window.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

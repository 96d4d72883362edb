//! Dense row-major `f32` tensors and the handful of kernels a LLaMA-style
//! decoder needs.
//!
//! Every [`Tensor`] holds finite values only. Constructors reject NaN/Inf and
//! every kernel checks its result, so a non-finite value surfaces as
//! [`Error::NonFinite`] at the operation that produced it.
//!
//! Reductions always run left to right over the reduced axis, which makes
//! results bit-reproducible. Row-parallel kernels keep that order per row.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

/// Default epsilon for [`rms_norm`].
pub const DEFAULT_RMS_EPS: f32 = 1e-5;
/// Default base for [`rope_rotate`].
pub const DEFAULT_ROPE_BASE: f32 = 10_000.0;

/// Work size (multiply-adds) above which [`matmul`] splits rows across threads.
const PAR_MATMUL_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if !all_finite(&data) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "ragged rows: expected {cols} columns, got {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    /// Internal constructor for kernels; checks finiteness of fresh results.
    fn from_result(shape: Vec<usize>, data: Vec<f32>, op: &'static str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !all_finite(&data) {
            return Err(Error::NonFinite(op));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows in the flattened `[rows, last_dim]` view.
    pub fn num_rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.last_dim())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        Ok(Self { shape, data: self.data })
    }

    /// Applies `f` elementwise, erroring if the result is not finite.
    pub fn map(&self, op: &'static str, f: impl Fn(f32) -> f32) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_result(self.shape.clone(), data, op)
    }

    /// Fallible elementwise map; shape is preserved.
    pub fn try_map(&self, f: impl Fn(f32) -> Result<f32>) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect::<Result<Vec<_>>>()?;
        Self::from_result(self.shape.clone(), data, "elementwise map")
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_result(self.shape.clone(), data, op)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self { shape: vec![n, m], data: out })
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::Shape(format!("expected a 2-D tensor, got {s:?}"))),
        }
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "dimensions must be positive, got {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} values, data has {len}"
        )));
    }
    Ok(())
}

fn all_finite(data: &[f32]) -> bool {
    data.iter().all(|v| v.is_finite())
}

/// Matrix product `a[m,k] · b[k,n]`.
///
/// Each output element accumulates over `k` from left to right starting at
/// zero, which is exactly what a naive triple loop does.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let row_kernel = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Tensor::from_result(vec![m, n], out, "matmul")
}

/// RMS normalization over the last axis: `v_i / sqrt(mean(v²) + eps) · gamma_i`.
pub fn rms_norm(x: &Tensor, gamma: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 {
        return Err(invalid("rms_norm over an empty axis"));
    }
    if gamma.rank() != 1 || gamma.len() != d {
        return Err(Error::Shape(format!(
            "rms_norm gamma {:?} does not match last axis {d}",
            gamma.shape()
        )));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(invalid(format!("rms_norm eps must be non-negative, got {eps}")));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let mean_sq = row.iter().fold(0.0f32, |s, v| s + v * v) / d as f32;
        let inv = 1.0 / (mean_sq + eps).sqrt();
        out.extend(row.iter().zip(gamma.data()).map(|(v, g)| v * inv * g));
    }
    Tensor::from_result(x.shape.clone(), out, "rms_norm")
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.dims2()?;
    let mut data = x.data.clone();
    for row in data.chunks_exact_mut(x.last_dim()) {
        softmax_in_place(row);
    }
    Tensor::from_result(x.shape.clone(), data, "softmax")
}

#[inline]
pub fn silu_scalar(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.map("silu", silu_scalar)
}

/// Rotary position embedding on `[seq, n_heads, head_dim]`.
///
/// The pair `(x[2i], x[2i+1])` at position `pos` turns by
/// `pos · base^(-2i / head_dim)` radians.
pub fn rope_rotate(x: &Tensor, base: f32) -> Result<Tensor> {
    let (seq, heads, head_dim) = match x.shape() {
        &[s, h, d] => (s, h, d),
        s => {
            return Err(Error::Shape(format!(
                "rope expects [seq, n_heads, head_dim], got {s:?}"
            )))
        }
    };
    if head_dim % 2 != 0 {
        return Err(invalid(format!("rope head_dim must be even, got {head_dim}")));
    }
    if base.is_nan() || base <= 0.0 {
        return Err(invalid(format!("rope base must be positive, got {base}")));
    }
    let freqs: Vec<f64> = (0..head_dim / 2)
        .map(|i| (base as f64).powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut out = x.data.clone();
    for pos in 0..seq {
        let sin_cos: Vec<(f32, f32)> = freqs
            .iter()
            .map(|f| {
                let (s, c) = (pos as f64 * f).sin_cos();
                (s as f32, c as f32)
            })
            .collect();
        for h in 0..heads {
            let off = (pos * heads + h) * head_dim;
            let v = &mut out[off..off + head_dim];
            for (i, &(s, c)) in sin_cos.iter().enumerate() {
                let (a, b) = (v[2 * i], v[2 * i + 1]);
                v[2 * i] = a * c - b * s;
                v[2 * i + 1] = a * s + b * c;
            }
        }
    }
    Tensor::from_result(x.shape.clone(), out, "rope")
}

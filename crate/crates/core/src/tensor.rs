//! Dense row-major `f64` tensors and the handful of numeric kernels the
//! engine needs.
//!
//! Tensors are immutable once built. Every operation allocates its result.
//! Non-finite values are rejected at construction; in debug builds every
//! operation re-checks its output.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    name: Option<String>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        if let Some(name) = &self.name {
            s.field("name", name);
        }
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        } else {
            s.field("len", &self.data.len());
        }
        s.finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor of shape {shape:?} at flat index {pos}"
            )));
        }
        Ok(Self {
            shape,
            data,
            name: None,
        })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyInput("matrix rows"));
        };
        let cols = first.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                lhs: vec![cols],
                rhs: vec![bad.len()],
                context: "from_rows",
            });
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::matrix(n, n, data)
    }

    /// Gaussian tensor from a ChaCha8 stream; identical seeds give identical bits.
    pub fn gaussian(shape: Vec<usize>, mean: f64, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(mean, std)
            .map_err(|e| Error::Shape(format!("invalid normal parameters: {e}")))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Self::new(shape, data)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// Trailing extent for matrices, 1 for vectors.
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

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// SHA-256 over the shape and the little-endian bytes of the data.
    pub fn sha256(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in &self.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    fn checked(self) -> Self {
        #[cfg(debug_assertions)]
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            panic!(
                "non-finite value produced at flat index {pos} of tensor {:?}",
                self.shape
            );
        }
        self
    }

    fn same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
                context,
            });
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            name: None,
        }
        .checked()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::DimensionMismatch {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
                context: "matmul",
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
            name: None,
        }
        .checked())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            name: None,
        }
        .checked())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            name: None,
        }
        .checked())
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
            name: None,
        }
        .checked())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn silu(&self) -> Tensor {
        self.map(silu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Softmax over all elements.
    pub fn softmax(&self) -> Result<Tensor> {
        Ok(Tensor {
            shape: self.shape.clone(),
            data: softmax(&self.data)?,
            name: None,
        }
        .checked())
    }

    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Result<Tensor> {
        self.same_shape(gain, "rms_norm")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: rms_norm(&self.data, &gain.data, eps),
            name: None,
        }
        .checked())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn top_k_indices(&self, k: usize) -> Result<Vec<usize>> {
        top_k_indices(&self.data, k)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d silu / dx
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn rms(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    (ms + eps).sqrt()
}

pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let r = rms(x, eps);
    x.iter().zip(gain).map(|(v, g)| v * g / r).collect()
}

/// Backward of `rms_norm` with respect to `x`.
pub fn rms_norm_backward(x: &[f64], gain: &[f64], eps: f64, dy: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let r = rms(x, eps);
    let dot: f64 = dy
        .iter()
        .zip(gain)
        .zip(x)
        .map(|((d, g), v)| d * g * v)
        .sum();
    let coef = dot / (n * r * r * r);
    x.iter()
        .zip(gain)
        .zip(dy)
        .map(|((v, g), d)| g * d / r - v * coef)
        .collect()
}

/// First index of the maximum value.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, descending by value; equal values
/// resolve to the lower index first.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::KOutOfRange {
            k,
            num_experts: v.len(),
        });
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row vector times matrix: `x · W` with `W` of shape `[x.len(), n]`.
pub fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let n = w.cols();
    debug_assert_eq!(x.len(), w.rows());
    let mut out = vec![0.0; n];
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xv * wv;
        }
    }
    out
}

/// `dy · Wᵀ`: pulls a gradient back through `vec_mat`.
pub fn vec_mat_t(dy: &[f64], w: &Tensor) -> Vec<f64> {
    debug_assert_eq!(dy.len(), w.cols());
    (0..w.rows()).map(|i| dot(w.row(i), dy)).collect()
}

/// Accumulates the outer product `xᵀ dy` into a row-major buffer.
pub fn add_outer(acc: &mut [f64], x: &[f64], dy: &[f64]) {
    let n = dy.len();
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (a, &d) in acc[i * n..(i + 1) * n].iter_mut().zip(dy) {
            *a += xv * d;
        }
    }
}

pub fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

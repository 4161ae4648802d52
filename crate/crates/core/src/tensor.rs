//! Dense reference linear algebra.
//!
//! Everything here is the slow, obviously-correct path that the packed
//! kernels and the backward pass are validated against. Storage is `f32`;
//! dot products and reductions accumulate in `f64` and round once.

use std::ops::{Deref, DerefMut};

use crate::error::{BnnError, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(BnnError::Config(format!(
                "matrix data has {} elements, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(BnnError::Data(format!(
                "non-finite matrix element at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(RealMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for tests and literals.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        RealMatrix::new(rows.len(), cols, data).expect("finite literal matrix")
    }

    pub fn identity(n: usize) -> Self {
        let mut m = RealMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> RealMatrix {
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm, accumulated in `f64`.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Dense `f32` vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RealVector(Vec<f32>);

impl RealVector {
    pub fn new(data: Vec<f32>) -> Self {
        RealVector(data)
    }

    pub fn zeros(len: usize) -> Self {
        RealVector(vec![0.0; len])
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl From<Vec<f32>> for RealVector {
    fn from(v: Vec<f32>) -> Self {
        RealVector(v)
    }
}

impl From<&[f32]> for RealVector {
    fn from(v: &[f32]) -> Self {
        RealVector(v.to_vec())
    }
}

impl Deref for RealVector {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl DerefMut for RealVector {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `w · x + bias`.
pub fn gemv(w: &RealMatrix, x: &[f32], bias: &[f32]) -> Result<RealVector> {
    if w.cols() != x.len() || w.rows() != bias.len() {
        return Err(BnnError::Config(format!(
            "gemv shape mismatch: w is {}x{}, x has {}, bias has {}",
            w.rows(),
            w.cols(),
            x.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0f32; w.rows()];
    gemv_into(w, x, bias, &mut out);
    Ok(RealVector(out))
}

/// Unchecked `gemv` into a caller buffer. Shapes must already agree.
pub(crate) fn gemv_into(w: &RealMatrix, x: &[f32], bias: &[f32], out: &mut [f32]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (&a, &b) in w.row(i).iter().zip(x) {
            acc += f64::from(a) * f64::from(b);
        }
        *o = (acc + f64::from(bias[i])) as f32;
    }
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    (1.0 / (1.0 + (-f64::from(x)).exp())) as f32
}

pub fn sigmoid(x: &[f32]) -> RealVector {
    RealVector(x.iter().map(|&v| sigmoid_scalar(v)).collect())
}

/// Max-shifted softmax. An empty input yields an empty output.
pub fn softmax(x: &[f32]) -> RealVector {
    let mut out = vec![0.0f32; x.len()];
    softmax_into(x, &mut out);
    RealVector(out)
}

pub(crate) fn softmax_into(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let max = f64::from(max);
    let mut sum = 0.0f64;
    let mut exps = Vec::with_capacity(x.len());
    for &v in x {
        let e = (f64::from(v) - max).exp();
        sum += e;
        exps.push(e);
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// Smallest probability fed to the logarithm in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Cross-entropy of a softmax output against a class label.
///
/// Returns the loss and its gradient with respect to the pre-softmax
/// logits, `probs - one_hot(label)`.
pub fn cross_entropy(probs: &[f32], label: usize) -> Result<(f64, RealVector)> {
    if label >= probs.len() {
        return Err(BnnError::Data(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let loss = -f64::from(probs[label]).max(PROB_FLOOR).ln();
    let mut grad = probs.to_vec();
    grad[label] -= 1.0;
    Ok((loss, RealVector(grad)))
}

/// Central finite differences of `f` at `x`, all in `f64`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

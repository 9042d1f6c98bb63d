//! Dense multi-dimensional arrays with a reverse-mode differentiation tape.
//!
//! Tensors are row-major `f64` buffers (optionally quantized to `f32`
//! precision, see [`Precision`]) shared behind an `Arc`. All differentiable
//! operations live on [`Tape`]; calling an op records a node so that
//! [`Tape::backward`] can replay the computation in reverse. Any forward op
//! that produces a non-finite value fails with a numeric error instead of
//! propagating `Inf`/`NaN`.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, op_gradcheck_suite, GradCheckEntry, GradCheckReport};
pub use tape::{Gradients, Tape};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric precision of tape computations and checkpoint payloads.
///
/// `F64` is the default so gradient checks are meaningful. `F32` rounds the
/// result of every operation to the nearest single-precision value and
/// serializes parameters as 4-byte floats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub(crate) fn quantize(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Config(format!(
                "unknown precision {other:?} (expected \"f64\" or \"f32\")"
            ))),
        }
    }
}

/// Identifies the tape node a tensor was produced by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct TapeRef {
    pub tape: u64,
    pub node: usize,
}

/// A dense row-major array of `f64` values, rank 1 or 2.
///
/// Cloning is cheap: the buffer is shared. Tensors are immutable after
/// construction; ops return new tensors.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    pub(crate) node: Option<TapeRef>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    ///
    /// Extents must be positive, `product(shape)` must equal `data.len()`,
    /// and every value must be finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Dimension(format!(
                "tensor rank must be 1 or 2, got shape {shape:?}"
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} values but {} were given",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "tensor data contains NaN or Inf".to_string(),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::from_vec(vec![1], vec![v])
    }

    /// Rank-1 tensor from a plain vector.
    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Tensor::from_vec(vec![n], data)
    }

    /// Rank-2 single-row tensor (`1 x n`).
    pub fn row(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Tensor::from_vec(vec![1, n], data)
    }

    /// Rank-2 tensor from rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Dimension("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("matrix rows have unequal lengths".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(vec![rows.len(), cols], data)
    }

    /// Mark this tensor as a learnable leaf. Ops reject such tensors unless
    /// they have been registered with [`Tape::watch`] first.
    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "item() needs a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let cols = *self.shape.last().unwrap();
        self.data[r * cols + c]
    }

    /// Replace the value buffer, keeping `requires_grad`. Used by parameter
    /// updates; the returned tensor is detached from any tape.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        let mut t = Tensor::from_vec(self.shape.clone(), data)?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    /// Detached copy sharing the same buffer (drops any tape reference).
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            node: None,
        }
    }

    pub(crate) fn shares_buffer(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }
}

// Row-major kernels shared by forward ops and backward rules.
pub(crate) mod raw {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        out
    }

    pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = x[i * cols + j];
            }
        }
        out
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * cols..(i + 1) * cols];
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    pub fn logsumexp(xs: &[f64]) -> f64 {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }
}

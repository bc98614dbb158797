//! Dense row-major `f64` tensors and the layer-wise operations the network
//! is assembled from.
//!
//! There is no autodiff graph. Every differentiable op comes as an explicit
//! forward/backward pair; the forward either returns a cache or the caller
//! keeps the input around for the backward.

mod activation;
mod conv;
mod gradcheck;
mod linear;
mod norm;
mod optim;

pub use activation::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, softmax_cross_entropy,
    CrossEntropy,
};
pub use conv::{conv2d_backward, conv2d_forward, conv_out_extent, ConvGrads};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use norm::{
    batchnorm1d, batchnorm2d, batchnorm_backward, BatchNormCache, BnGrads, Mode, RunningStats,
    BN_EPSILON, BN_MOMENTUM,
};
pub use optim::{sgd_step, SgdConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", "data length", n, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", "element count", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers a contiguous column range `[start, start + width)` of a rank-2 tensor.
    pub fn columns(&self, start: usize, width: usize) -> Tensor {
        let (rows, cols) = (self.shape[0], self.shape[1]);
        assert!(start + width <= cols, "column range out of bounds");
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + start + width]);
        }
        Tensor {
            shape: vec![rows, width],
            data,
        }
    }

    /// Adds `src` (rows × width) into columns `[start, start + width)`.
    pub fn add_columns(&mut self, start: usize, src: &Tensor) {
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let width = src.shape[1];
        assert_eq!(src.shape[0], rows);
        assert!(start + width <= cols, "column range out of bounds");
        for r in 0..rows {
            let dst = &mut self.data[r * cols + start..r * cols + start + width];
            dst.iter_mut().zip(src.row(r)).for_each(|(d, s)| *d += s);
        }
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_columns(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat_columns of nothing".into()))?;
        let rows = first.shape[0];
        let mut width = 0;
        for p in parts {
            if p.rank() != 2 {
                return Err(Error::shape("concat_columns", "rank", 2, p.rank()));
            }
            if p.shape[0] != rows {
                return Err(Error::shape("concat_columns", "rows", rows, p.shape[0]));
            }
            width += p.shape[1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor {
            shape: vec![rows, width],
            data,
        })
    }

    /// Selects rows (first axis) of any-rank tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidInput("stack of nothing".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::InvalidInput(format!(
                    "stack: shape {:?} differs from {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// A trainable tensor with its gradient and SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum_buffer: Tensor,
}

impl ParamTensor {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum_buffer = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            momentum_buffer,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, grad: &Tensor) {
        self.grad.add_assign(grad);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

pub(crate) fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(op, "rank", rank, t.rank()));
    }
    Ok(())
}

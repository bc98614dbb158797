use super::{check_rank, Tensor};
use crate::error::{Error, Result};

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes gradient where the input was strictly positive; the subgradient at 0 is 0.
pub fn relu_backward(grad_out: &Tensor, cached_input: &Tensor) -> Tensor {
    assert_eq!(grad_out.shape(), cached_input.shape(), "relu_backward shape mismatch");
    let mut grad = grad_out.clone();
    grad.data_mut()
        .iter_mut()
        .zip(cached_input.data())
        .for_each(|(g, &x)| {
            if x <= 0.0 {
                *g = 0.0
            }
        });
    grad
}

/// Mean over the spatial positions of an NCHW tensor, giving N×C.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    check_rank("global_avg_pool", input, 4)?;
    let (n, c) = (input.dim(0), input.dim(1));
    let plane = input.dim(2) * input.dim(3);
    let mut out = Tensor::zeros(&[n, c]);
    for (o, chunk) in out.data_mut().iter_mut().zip(input.data().chunks(plane)) {
        *o = chunk.iter().sum::<f64>() / plane as f64;
    }
    Ok(out)
}

/// Spreads an N×C gradient uniformly over the spatial positions of `input_shape`.
pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if input_shape.len() != 4 {
        return Err(Error::shape("global_avg_pool_backward", "input rank", 4, input_shape.len()));
    }
    let expected = input_shape[0] * input_shape[1];
    if grad_out.len() != expected {
        return Err(Error::shape("global_avg_pool_backward", "grad_out length", expected, grad_out.len()));
    }
    let plane = input_shape[2] * input_shape[3];
    let mut grad = Tensor::zeros(input_shape);
    for (chunk, &g) in grad.data_mut().chunks_mut(plane).zip(grad_out.data()) {
        chunk.fill(g / plane as f64);
    }
    Ok(grad)
}

/// Per-sample cross-entropy and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub losses: Vec<f64>,
    /// `softmax(logits) - one_hot(label)`, one row per sample (not batch-averaged).
    pub grad: Tensor,
}

impl CrossEntropy {
    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Softmax cross-entropy with zero-based labels, stabilized by subtracting the row max.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
    check_rank("softmax_cross_entropy", logits, 2)?;
    let (b, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != b {
        return Err(Error::shape("softmax_cross_entropy", "label count", b, labels.len()));
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut losses = Vec::with_capacity(b);
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                op: "softmax_cross_entropy",
                label,
                classes: k,
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        losses.push(log_z - row[label]);
        let g = grad.row_mut(r);
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = (row[j] - log_z).exp();
        }
        g[label] -= 1.0;
    }
    Ok(CrossEntropy { losses, grad })
}

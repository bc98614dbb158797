use serde::{Deserialize, Serialize};

use super::{check_rank, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and (biased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
    outer: usize,
    channels: usize,
    inner: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Batch norm over a B×D input; statistics per column.
pub fn batchnorm1d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    check_rank("batchnorm1d", input, 2)?;
    normalize(
        "batchnorm1d",
        input,
        (input.dim(0), input.dim(1), 1),
        gamma,
        beta,
        stats,
        mode,
        momentum,
        eps,
    )
}

/// Batch norm over an NCHW input; statistics per channel over N·H·W.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    check_rank("batchnorm2d", input, 4)?;
    let layout = (input.dim(0), input.dim(1), input.dim(2) * input.dim(3));
    normalize("batchnorm2d", input, layout, gamma, beta, stats, mode, momentum, eps)
}

#[allow(clippy::too_many_arguments)]
fn normalize(
    op: &'static str,
    input: &Tensor,
    (outer, channels, inner): (usize, usize, usize),
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    for (name, t) in [
        ("gamma length", gamma),
        ("beta length", beta),
        ("running mean length", &stats.mean),
        ("running var length", &stats.var),
    ] {
        if t.len() != channels {
            return Err(Error::shape(op, name, channels, t.len()));
        }
    }
    let count = outer * inner;
    if mode == Mode::Train && count < 2 {
        return Err(Error::InvalidInput(format!(
            "{op}: train mode needs at least 2 values per channel, got {count}"
        )));
    }
    let x = input.data();
    let idx = |n: usize, c: usize| (n * channels + c) * inner;

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for (c, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                let mut s = 0.0;
                for n in 0..outer {
                    s += x[idx(n, c)..idx(n, c) + inner].iter().sum::<f64>();
                }
                *m = s / count as f64;
                let mut q = 0.0;
                for n in 0..outer {
                    q += x[idx(n, c)..idx(n, c) + inner]
                        .iter()
                        .map(|v| (v - *m) * (v - *m))
                        .sum::<f64>();
                }
                *v = q / count as f64;
            }
            for c in 0..channels {
                let rm = &mut stats.mean.data_mut()[c];
                *rm = (1.0 - momentum) * *rm + momentum * mean[c];
                let rv = &mut stats.var.data_mut()[c];
                *rv = (1.0 - momentum) * *rv + momentum * var[c];
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for n in 0..outer {
        for c in 0..channels {
            let range = idx(n, c)..idx(n, c) + inner;
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            for i in range {
                let h = (x[i] - mean[c]) * inv_std[c];
                normalized.data_mut()[i] = h;
                out.data_mut()[i] = g * h + b;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mode,
            outer,
            channels,
            inner,
        },
    ))
}

/// Backward of either batch-norm flavour. In train mode the gradient flows
/// through the batch mean and variance; in eval mode the op is affine.
pub fn batchnorm_backward(grad_out: &Tensor, cache: &BatchNormCache, gamma: &Tensor) -> Result<BnGrads> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            "grad_out element count",
            cache.normalized.len(),
            grad_out.len(),
        ));
    }
    let (outer, channels, inner) = (cache.outer, cache.channels, cache.inner);
    let idx = |n: usize, c: usize| (n * channels + c) * inner;
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let mut grad_gamma = Tensor::zeros(&[channels]);
    let mut grad_beta = Tensor::zeros(&[channels]);
    for c in 0..channels {
        let (mut sg, mut sb) = (0.0, 0.0);
        for n in 0..outer {
            for i in idx(n, c)..idx(n, c) + inner {
                sg += dy[i] * xh[i];
                sb += dy[i];
            }
        }
        grad_gamma.data_mut()[c] = sg;
        grad_beta.data_mut()[c] = sb;
    }
    let mut grad_input = Tensor::zeros(grad_out.shape());
    let count = (outer * inner) as f64;
    for c in 0..channels {
        let scale = gamma.data()[c] * cache.inv_std[c];
        let (sum_dy, sum_dy_xh) = (grad_beta.data()[c], grad_gamma.data()[c]);
        for n in 0..outer {
            for i in idx(n, c)..idx(n, c) + inner {
                grad_input.data_mut()[i] = match cache.mode {
                    Mode::Train => scale * (dy[i] - sum_dy / count - xh[i] * sum_dy_xh / count),
                    Mode::Eval => scale * dy[i],
                };
            }
        }
    }
    Ok(BnGrads {
        input: grad_input,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

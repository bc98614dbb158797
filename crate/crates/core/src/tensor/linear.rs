use super::{check_rank, Tensor};
use crate::error::{Error, Result};

/// `c = a·b + beta·c` for row-major `a` (m×k, or k×m when transposed) and
/// `b` (k×n, or n×k when transposed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices were checked above to cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_shapes(op: &'static str, input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    check_rank(op, input, 2)?;
    check_rank(op, weight, 2)?;
    let (b, i) = (input.dim(0), input.dim(1));
    let (o, wi) = (weight.dim(0), weight.dim(1));
    if wi != i {
        return Err(Error::shape(op, "inner dimension (weight dim 1)", wi, i));
    }
    Ok((b, i, o))
}

/// `out[b, o] = Σ_i in[b, i]·w[o, i] + bias[o]`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, i, o) = check_shapes("linear_forward", input, weight)?;
    if bias.len() != o {
        return Err(Error::shape("linear_forward", "bias length", o, bias.len()));
    }
    let mut out = Tensor::zeros(&[b, o]);
    for r in 0..b {
        out.row_mut(r).copy_from_slice(bias.data());
    }
    gemm(b, i, o, input.data(), false, weight.data(), true, out.data_mut(), 1.0);
    Ok(out)
}

pub fn linear_backward(grad_out: &Tensor, cached_input: &Tensor, weight: &Tensor) -> Result<LinearGrads> {
    let (b, i, o) = check_shapes("linear_backward", cached_input, weight)?;
    check_rank("linear_backward", grad_out, 2)?;
    if grad_out.dim(0) != b {
        return Err(Error::shape("linear_backward", "grad_out rows", b, grad_out.dim(0)));
    }
    if grad_out.dim(1) != o {
        return Err(Error::shape("linear_backward", "grad_out columns", o, grad_out.dim(1)));
    }
    let mut grad_input = Tensor::zeros(&[b, i]);
    gemm(b, o, i, grad_out.data(), false, weight.data(), false, grad_input.data_mut(), 0.0);
    let mut grad_weight = Tensor::zeros(&[o, i]);
    gemm(o, b, i, grad_out.data(), true, cached_input.data(), false, grad_weight.data_mut(), 0.0);
    let mut grad_bias = Tensor::zeros(&[o]);
    for r in 0..b {
        grad_bias
            .data_mut()
            .iter_mut()
            .zip(grad_out.row(r))
            .for_each(|(g, v)| *g += v);
    }
    Ok(LinearGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

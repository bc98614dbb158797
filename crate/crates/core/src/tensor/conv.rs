use super::linear::gemm;
use super::{check_rank, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one spatial axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn check(op: &'static str, input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        check_rank(op, input, 4)?;
        check_rank(op, weight, 4)?;
        let (n, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let (c_out, wi, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        if wi != c_in {
            return Err(Error::shape(op, "input channels (weight dim 1)", wi, c_in));
        }
        if kh != kw {
            return Err(Error::shape(op, "kernel width (square kernels only)", kh, kw));
        }
        if stride == 0 {
            return Err(Error::InvalidInput(format!("{op}: stride must be positive")));
        }
        let ho = conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::shape(op, "padded input height (kernel does not fit)", kh, h + 2 * pad))?;
        let wo = conv_out_extent(w, kw, stride, pad)
            .ok_or_else(|| Error::shape(op, "padded input width (kernel does not fit)", kw, w + 2 * pad))?;
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image (C×H×W) into a (C·K·K) × (Ho·Wo) column matrix.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Inverse scatter of `im2col`: accumulates columns back into an image gradient.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, NCHW input and OIKK weight, zero padding.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = Geometry::check("conv2d_forward", input, weight, stride, pad)?;
    if bias.len() != g.c_out {
        return Err(Error::shape("conv2d_forward", "bias length", g.c_out, bias.len()));
    }
    let (p, kk) = (g.positions(), g.patch_len());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut out = Tensor::zeros(&[g.n, g.c_out, g.ho, g.wo]);
    let mut cols = vec![0.0; kk * p];
    for n in 0..g.n {
        g.im2col(&input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        for (o, plane) in dst.chunks_mut(p).enumerate() {
            plane.fill(bias.data()[o]);
        }
        gemm(g.c_out, kk, p, weight.data(), false, &cols, false, dst, 1.0);
    }
    Ok(out)
}

/// Gradients of `conv2d_forward` with respect to input, weight and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    cached_input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let g = Geometry::check("conv2d_backward", cached_input, weight, stride, pad)?;
    let expected = [g.n, g.c_out, g.ho, g.wo];
    check_rank("conv2d_backward", grad_out, 4)?;
    for (axis, (&e, &got)) in expected.iter().zip(grad_out.shape()).enumerate() {
        if e != got {
            return Err(Error::shape("conv2d_backward", format!("grad_out dim {axis}"), e, got));
        }
    }
    let (p, kk) = (g.positions(), g.patch_len());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut grad_input = Tensor::zeros(cached_input.shape());
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut grad_bias = Tensor::zeros(&[g.c_out]);
    let mut cols = vec![0.0; kk * p];
    let mut dcols = vec![0.0; kk * p];
    for n in 0..g.n {
        let dout = &grad_out.data()[n * out_len..(n + 1) * out_len];
        for (o, plane) in dout.chunks(p).enumerate() {
            grad_bias.data_mut()[o] += plane.iter().sum::<f64>();
        }
        g.im2col(&cached_input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        // dW (O×KK) += dout (O×P) · colsᵀ (P×KK)
        gemm(g.c_out, p, kk, dout, false, &cols, true, grad_weight.data_mut(), 1.0);
        // dcols (KK×P) = Wᵀ (KK×O) · dout (O×P)
        gemm(kk, g.c_out, p, weight.data(), true, dout, false, &mut dcols, 0.0);
        g.col2im(&dcols, &mut grad_input.data_mut()[n * in_len..(n + 1) * in_len]);
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution used as the oracle.
    fn naive_conv(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let (o, k) = (weight.dim(0), weight.dim(2));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.data()[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((b * c + ic) * h + iy as usize) * w + ix as usize;
                                    let wi = ((oc * c + ic) * k + ky) * k + kx;
                                    acc += input.data()[xi] * weight.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sum_of_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        let y = conv2d_forward(&x, &w, &b, 2, 1).unwrap();
        let oracle = naive_conv(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        for (a, e) in y.data().iter().zip(oracle.data()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let g = conv2d_backward(&Tensor::zeros(&[1, 3, 5, 5]), &x, &w, 1, 1).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_loss_weight_grad_is_input_sum() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1], 0.7);
        let g = conv2d_backward(&Tensor::full(&[1, 1, 2, 2], 1.0), &x, &w, 1, 0).unwrap();
        assert_eq!(g.weight.data(), &[x.sum()]);
        assert_eq!(g.bias.data(), &[4.0]);
    }

    #[test]
    fn backward_mismatched_grad_out() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_backward(&Tensor::zeros(&[1, 1, 4, 4]), &x, &w, 1, 0).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 2, 5, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let (stride, pad) = (2, 1);
        let y = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
        let r = Tensor::randn(y.shape(), 1.0, &mut rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            let y = conv2d_forward(x, w, b, stride, pad).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let g = conv2d_backward(&r, &x, &w, stride, pad).unwrap();
        let fx = finite_diff_grad(|t| loss(t, &w, &b), &x, 1e-5);
        let fw = finite_diff_grad(|t| loss(&x, t, &b), &w, 1e-5);
        let fb = finite_diff_grad(|t| loss(&x, &w, t), &b, 1e-5);
        assert!(relative_error(&g.input, &fx) < 1e-6);
        assert!(relative_error(&g.weight, &fw) < 1e-6);
        assert!(relative_error(&g.bias, &fb) < 1e-6);
    }
}

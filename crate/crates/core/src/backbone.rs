//! Small convolutional feature extractor: a plain stack of
//! conv → batch norm → ReLU stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm2d, batchnorm_backward, conv2d_backward, conv2d_forward, conv_out_extent, relu, relu_backward,
    BatchNormCache, Mode, ParamTensor, RunningStats, Tensor, BN_EPSILON, BN_MOMENTUM,
};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub stage_channels: Vec<usize>,
    /// Per-stage strides; the last entry is replaced by `last_stride`.
    pub stage_strides: Vec<usize>,
    pub last_stride: usize,
    pub kernel: usize,
    /// (height, width) of the input images.
    pub input_hw: (usize, usize),
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![2, 2, 2],
            last_stride: 1,
            kernel: 3,
            input_hw: (64, 32),
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::InvalidSpec("backbone needs at least one stage".into()));
        }
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::InvalidSpec(format!(
                "stage_channels has {} entries but stage_strides has {}",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if !matches!(self.last_stride, 1 | 2) {
            return Err(Error::InvalidSpec(format!("last_stride must be 1 or 2, got {}", self.last_stride)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidSpec(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.stage_channels.iter().chain(&self.stage_strides).any(|&v| v == 0) {
            return Err(Error::InvalidSpec("stage channels and strides must be positive".into()));
        }
        self.output_hw(self.input_hw).map(|_| ())
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = self.stage_strides.clone();
        if let Some(last) = s.last_mut() {
            *last = self.last_stride;
        }
        s
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated spec has stages")
    }

    /// Spatial size of the final feature maps for an `(h, w)` input.
    pub fn output_hw(&self, (mut h, mut w): (usize, usize)) -> Result<(usize, usize)> {
        let pad = self.kernel / 2;
        for (i, s) in self.strides().into_iter().enumerate() {
            if h % s != 0 || w % s != 0 {
                return Err(Error::InvalidSpec(format!(
                    "stage {i}: {h}x{w} maps are not divisible by stride {s}"
                )));
            }
            h = conv_out_extent(h, self.kernel, s, pad)
                .ok_or_else(|| Error::InvalidSpec(format!("stage {i}: kernel larger than padded input")))?;
            w = conv_out_extent(w, self.kernel, s, pad)
                .ok_or_else(|| Error::InvalidSpec(format!("stage {i}: kernel larger than padded input")))?;
        }
        Ok((h, w))
    }
}

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    pub stats: RunningStats,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Tensor,
    bn: BatchNormCache,
    pre_relu: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    pub stages: Vec<ConvStage>,
    cache: Option<Vec<StageCache>>,
}

impl Backbone {
    /// He-normal conv weights, zero biases, unit BN scale.
    pub fn new<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(spec.stage_channels.len());
        let mut c_in = INPUT_CHANNELS;
        for (&c_out, stride) in spec.stage_channels.iter().zip(spec.strides()) {
            let fan_in = (c_in * spec.kernel * spec.kernel) as f64;
            let w = Tensor::randn(&[c_out, c_in, spec.kernel, spec.kernel], (2.0 / fan_in).sqrt(), rng);
            stages.push(ConvStage {
                weight: ParamTensor::new(w),
                bias: ParamTensor::new(Tensor::zeros(&[c_out])),
                gamma: ParamTensor::new(Tensor::full(&[c_out], 1.0)),
                beta: ParamTensor::new(Tensor::zeros(&[c_out])),
                stats: RunningStats::new(c_out),
                stride,
                pad: spec.kernel / 2,
            });
            c_in = c_out;
        }
        Ok(Self {
            spec: spec.clone(),
            stages,
            cache: None,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        if images.rank() != 4 {
            return Err(Error::shape("backbone_forward", "image rank", 4, images.rank()));
        }
        if images.dim(1) != INPUT_CHANNELS {
            return Err(Error::shape("backbone_forward", "image channels", INPUT_CHANNELS, images.dim(1)));
        }
        self.spec
            .output_hw((images.dim(2), images.dim(3)))
            .map_err(|e| Error::InvalidInput(format!("backbone_forward: incompatible spatial size: {e}")))?;
        let keep = mode == Mode::Train;
        let mut caches = Vec::new();
        let mut x = images.clone();
        for stage in &mut self.stages {
            let z = conv2d_forward(&x, &stage.weight.value, &stage.bias.value, stage.stride, stage.pad)?;
            let (y, bn) = batchnorm2d(
                &z,
                &stage.gamma.value,
                &stage.beta.value,
                &mut stage.stats,
                mode,
                BN_MOMENTUM,
                BN_EPSILON,
            )?;
            let out = relu(&y);
            if keep {
                caches.push(StageCache {
                    input: std::mem::replace(&mut x, out),
                    bn,
                    pre_relu: y,
                });
            } else {
                x = out;
            }
        }
        self.cache = keep.then_some(caches);
        Ok(x)
    }

    /// Backpropagates through the cached train-mode forward, accumulating
    /// parameter gradients, and returns the gradient with respect to the images.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let caches = self.cache.take().ok_or(Error::MissingCache("backbone_backward"))?;
        let mut grad = grad_out.clone();
        for (stage, cache) in self.stages.iter_mut().zip(caches).rev() {
            let g = relu_backward(&grad, &cache.pre_relu);
            let bn = batchnorm_backward(&g, &cache.bn, &stage.gamma.value)?;
            stage.gamma.accumulate(&bn.gamma);
            stage.beta.accumulate(&bn.beta);
            let conv = conv2d_backward(&bn.input, &cache.input, &stage.weight.value, stage.stride, stage.pad)?;
            stage.weight.accumulate(&conv.weight);
            stage.bias.accumulate(&conv.bias);
            grad = conv.input;
        }
        Ok(grad)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("backbone.stage{i}.conv.weight"), &mut s.weight);
            f(&format!("backbone.stage{i}.conv.bias"), &mut s.bias);
            f(&format!("backbone.stage{i}.bn.gamma"), &mut s.gamma);
            f(&format!("backbone.stage{i}.bn.beta"), &mut s.beta);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("backbone.stage{i}.bn.running_mean"), &mut s.stats.mean);
            f(&format!("backbone.stage{i}.bn.running_var"), &mut s.stats.var);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::tensor::{finite_diff_grad, relative_error};

    fn spec(last_stride: usize) -> BackboneSpec {
        BackboneSpec {
            last_stride,
            input_hw: (32, 16),
            ..BackboneSpec::default()
        }
    }

    #[test]
    fn last_stride_controls_final_size() {
        assert_eq!(spec(1).output_hw((32, 16)).unwrap(), (8, 4));
        assert_eq!(spec(2).output_hw((32, 16)).unwrap(), (4, 2));
        let mut rng = seed::rng(0);
        let mut net = Backbone::new(&spec(1), &mut rng).unwrap();
        let y = net.forward(&Tensor::zeros(&[2, 3, 32, 16]), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 64, 8, 4]);
    }

    #[test]
    fn spec_validation() {
        assert!(BackboneSpec { last_stride: 3, ..spec(1) }.validate().is_err());
        assert!(BackboneSpec { stage_strides: vec![2, 2], ..spec(1) }.validate().is_err());
        assert!(BackboneSpec { input_hw: (30, 16), ..spec(1) }.validate().is_err());
        let mut net = Backbone::new(&spec(1), &mut seed::rng(0)).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 3, 30, 16]), Mode::Eval).is_err());
    }

    #[test]
    fn center_tap_stage_passes_input_through() {
        let s = BackboneSpec {
            stage_channels: vec![3],
            stage_strides: vec![1],
            last_stride: 1,
            kernel: 3,
            input_hw: (4, 4),
        };
        let mut net = Backbone::new(&s, &mut seed::rng(0)).unwrap();
        let stage = &mut net.stages[0];
        stage.weight.value = Tensor::from_fn(&[3, 3, 3, 3], |i| {
            let (o, c, k) = (i / 27, (i / 9) % 3, i % 9);
            if o == c && k == 4 {
                1.0
            } else {
                0.0
            }
        });
        stage.stats.var = Tensor::full(&[3], 1.0 - BN_EPSILON);
        let x = Tensor::uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut seed::rng(1));
        let y = net.forward(&x, Mode::Eval).unwrap();
        assert!(relative_error(&x, &y) < 1e-12);
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut net = Backbone::new(&spec(1), &mut seed::rng(0)).unwrap();
        assert!(matches!(
            net.backward(&Tensor::zeros(&[1, 64, 8, 4])),
            Err(Error::MissingCache(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut net = Backbone::new(&spec(2), &mut seed::rng(3)).unwrap();
        let x = Tensor::uniform(&[2, 3, 32, 16], 0.0, 1.0, &mut seed::rng(4));
        let y = net.forward(&x, Mode::Train).unwrap();
        let g = net.backward(&Tensor::zeros(y.shape())).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        net.visit_params(&mut |_, p| assert!(p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = BackboneSpec {
            stage_channels: vec![4, 6],
            stage_strides: vec![2, 2],
            last_stride: 1,
            kernel: 3,
            input_hw: (8, 8),
        };
        let net0 = Backbone::new(&s, &mut seed::rng(5)).unwrap();
        let x = Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut seed::rng(6));
        let r = Tensor::randn(&[2, 6, 4, 4], 1.0, &mut seed::rng(7));
        let loss = |net: &mut Backbone, x: &Tensor| -> f64 {
            let y = net.forward(x, Mode::Train).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut net = net0.clone();
        loss(&mut net, &x);
        let gx = net.backward(&r).unwrap();
        let fx = finite_diff_grad(|t| loss(&mut net0.clone(), t), &x, 1e-5);
        assert!(relative_error(&gx, &fx) < 1e-5);

        let w = net0.stages[0].weight.value.clone();
        let fw = finite_diff_grad(
            |t| {
                let mut n = net0.clone();
                n.stages[0].weight.value = t.clone();
                loss(&mut n, &x)
            },
            &w,
            1e-5,
        );
        assert!(relative_error(&net.stages[0].weight.grad, &fw) < 1e-5);
    }
}

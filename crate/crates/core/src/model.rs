//! Backbone and head bound together into one trainable network.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::error::{Error, Result};
use crate::head::{DescriptorSet, Head, HeadOutput, HeadSpec};
use crate::seed;
use crate::tensor::{Mode, ParamTensor, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        let c = self.backbone.out_channels();
        if self.head.c_total != c {
            return Err(Error::InvalidSpec(format!(
                "head expects C = {} but the backbone produces {c} channels",
                self.head.c_total
            )));
        }
        let (h, _) = self.backbone.output_hw(self.backbone.input_hw)?;
        let p = self.head.part_stripes;
        if p > 0 && h % p != 0 {
            return Err(Error::InvalidSpec(format!(
                "feature map height {h} is not divisible by {p} stripes"
            )));
        }
        Ok(())
    }
}

/// Images per forward pass when extracting descriptors.
const INFER_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    pub backbone: Backbone,
    pub head: Head,
}

impl Model {
    pub fn new(spec: &ModelSpec, seed_value: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed::derive(seed_value, "init"));
        let backbone = Backbone::new(&spec.backbone, &mut rng)?;
        let head = Head::new(&spec.head, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            backbone,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<HeadOutput> {
        let maps = self.backbone.forward(images, mode)?;
        self.head.forward(&maps, mode)
    }

    /// Backward of a train-mode `forward`; accumulates all parameter gradients.
    pub fn backward(&mut self, grad_logits: &[Tensor], grad_descriptor: Option<&Tensor>) -> Result<Tensor> {
        let g = self.head.backward(grad_logits, grad_descriptor)?;
        self.backbone.backward(&g)
    }

    /// Eval-mode descriptors for a stack of images, computed in chunks.
    pub fn infer(&self, images: &Tensor) -> Result<DescriptorSet> {
        let mut net = self.clone();
        let n = images.dim(0);
        let mut parts: Vec<DescriptorSet> = Vec::new();
        for start in (0..n).step_by(INFER_BATCH) {
            let idx: Vec<usize> = (start..(start + INFER_BATCH).min(n)).collect();
            parts.push(net.forward(&images.select_rows(&idx), Mode::Eval)?.descriptors);
        }
        let cat = |pick: &dyn Fn(&DescriptorSet) -> &Vec<Tensor>| -> Vec<Tensor> {
            let width = pick(&parts[0]).len();
            (0..width)
                .map(|g| {
                    let rows: Vec<f64> = parts.iter().flat_map(|p| pick(p)[g].data().iter().copied()).collect();
                    let d = pick(&parts[0])[g].dim(1);
                    Tensor::new(&[n, d], rows).expect("consistent descriptor widths")
                })
                .collect()
        };
        Ok(DescriptorSet {
            groups: cat(&|p| &p.groups),
            stripes: cat(&|p| &p.stripes),
        })
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.backbone.visit_params(f);
        self.head.visit_params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_buffers(f);
        self.head.visit_buffers(f);
    }

    /// Parameter values and buffers by name, in a fixed order.
    pub fn named_tensors(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, p| out.push((n.to_string(), p.value.clone())));
        self.visit_buffers(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.numel());
        n
    }
}

//! Channel-group head.
//!
//! The pooled global feature `F` (B×C) is cut into `n_c` contiguous channel
//! groups, each group is transformed by a linear → BN → ReLU embedding
//! (optionally one shared set of weights), and each branch gets its own
//! identity classifier. The five architecture variants are expressed with the
//! same two building blocks:
//!
//! | variant | embedding inputs          | classifiers                  |
//! |---------|---------------------------|------------------------------|
//! | A       | `n_c` channel groups      | one per group                |
//! | B       | full feature, once        | one                          |
//! | C       | `n_c` channel groups      | one, on the concatenation    |
//! | D       | full feature, once        | `n_c`, all on that embedding |
//! | E       | full feature, `n_c` times | one per embedding            |
//!
//! An optional stripe head adds `p` horizontal-stripe branches (PCB style)
//! computed from the un-pooled feature maps.

mod stripe;

pub use stripe::{stripe_pool, stripe_pool_backward};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm1d, batchnorm_backward, global_avg_pool, global_avg_pool_backward, linear_backward,
    linear_forward, relu, relu_backward, softmax_cross_entropy, BatchNormCache, Mode, ParamTensor,
    RunningStats, Tensor, BN_EPSILON, BN_MOMENTUM,
};

/// Standard deviation of the identity-classifier weight initialization.
pub const CLASSIFIER_INIT_STD: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Channel grouping with one classifier per group.
    A,
    /// Single embedding and classifier.
    B,
    /// Channel grouping, one classifier over the concatenated groups.
    C,
    /// One embedding feeding `n_c` classifiers.
    D,
    /// `n_c` independent full-feature embeddings, one classifier each.
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            other => Err(Error::InvalidSpec(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub variant: Variant,
    pub n_c: usize,
    /// Channel count `C` of the pooled feature.
    pub c_total: usize,
    pub embed_dim: usize,
    pub n_id: usize,
    pub shared_embed: bool,
    /// Number of horizontal stripes of the part head; 0 disables it.
    #[serde(default)]
    pub part_stripes: usize,
}

impl HeadSpec {
    pub fn c_group(&self) -> usize {
        self.c_total / self.n_c
    }

    /// Forces `n_c = 1` for variant B; every other field is kept.
    pub fn normalized(mut self) -> Self {
        if self.variant == Variant::B {
            self.n_c = 1;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 || self.c_total == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidSpec("n_c, c_total and embed_dim must be positive".into()));
        }
        if self.n_id < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 identities, got {}", self.n_id)));
        }
        if self.c_total % self.n_c != 0 {
            return Err(Error::InvalidSpec(format!(
                "C = {} is not divisible by n_c = {}",
                self.c_total, self.n_c
            )));
        }
        if self.variant == Variant::B && self.n_c != 1 {
            return Err(Error::InvalidSpec(format!("variant B requires n_c = 1, got {}", self.n_c)));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let n = self.n_c;
        let param_set = |i: usize| if self.shared_embed { 0 } else { i };
        let (units, classifiers): (Vec<(Source, usize)>, Vec<ClassifierInput>) = match self.variant {
            Variant::A => (
                (0..n).map(|i| (Source::Group(i), param_set(i))).collect(),
                (0..n).map(ClassifierInput::Embed).collect(),
            ),
            Variant::B => (vec![(Source::Full, 0)], vec![ClassifierInput::Embed(0)]),
            Variant::C => (
                (0..n).map(|i| (Source::Group(i), param_set(i))).collect(),
                vec![ClassifierInput::Concat],
            ),
            Variant::D => (
                vec![(Source::Full, 0)],
                (0..n).map(|_| ClassifierInput::Embed(0)).collect(),
            ),
            Variant::E => (
                (0..n).map(|i| (Source::Full, param_set(i))).collect(),
                (0..n).map(ClassifierInput::Embed).collect(),
            ),
        };
        let param_sets = units.iter().map(|u| u.1).max().unwrap_or(0) + 1;
        Layout {
            units,
            classifiers,
            param_sets,
        }
    }

    /// Width of the embedding input for the channel-group path.
    fn embed_in(&self) -> usize {
        match self.variant {
            Variant::A | Variant::C => self.c_group(),
            Variant::B | Variant::D | Variant::E => self.c_total,
        }
    }

    /// Number of descriptor groups produced by the channel path.
    pub fn n_groups(&self) -> usize {
        self.layout().units.len()
    }

    pub fn n_branches(&self) -> usize {
        self.layout().classifiers.len() + self.part_stripes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Group(usize),
    Full,
    Stripe(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClassifierInput {
    Embed(usize),
    Concat,
}

struct Layout {
    units: Vec<(Source, usize)>,
    classifiers: Vec<ClassifierInput>,
    param_sets: usize,
}

/// Trainable scalar counts of a head, split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embed: usize,
    pub classifier: usize,
    pub stripes: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embed + self.classifier + self.stripes
    }
}

pub fn param_breakdown(spec: &HeadSpec) -> ParamCount {
    let d = spec.embed_dim;
    let layout = spec.layout();
    let embed_set = spec.embed_in() * d + d + 2 * d;
    let classifier = layout
        .classifiers
        .iter()
        .map(|c| match c {
            ClassifierInput::Embed(_) => d * spec.n_id + spec.n_id,
            ClassifierInput::Concat => layout.units.len() * d * spec.n_id + spec.n_id,
        })
        .sum();
    let stripe_branch = spec.c_total * d + 3 * d + d * spec.n_id + spec.n_id;
    ParamCount {
        embed: layout.param_sets * embed_set,
        classifier,
        stripes: spec.part_stripes * stripe_branch,
    }
}

pub fn param_count(spec: &HeadSpec) -> usize {
    param_breakdown(spec).total()
}

/// Uniform partition of a B×C feature into `n_c` contiguous channel groups:
/// group `i` holds channels `[i·C_g, (i+1)·C_g)`.
pub fn slice_channel_groups(features: &Tensor, n_c: usize) -> Result<Vec<Tensor>> {
    if features.rank() != 2 {
        return Err(Error::shape("slice_channel_groups", "rank", 2, features.rank()));
    }
    let c = features.dim(1);
    if n_c == 0 || c % n_c != 0 {
        return Err(Error::InvalidSpec(format!("C = {c} is not divisible by n_c = {n_c}")));
    }
    let cg = c / n_c;
    Ok((0..n_c).map(|i| features.columns(i * cg, cg)).collect())
}

/// Linear → BN → ReLU weights; possibly referenced by several branches.
#[derive(Debug, Clone)]
pub struct EmbedParams {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
}

impl EmbedParams {
    fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = Tensor::randn(&[d_out, d_in], (2.0 / d_in as f64).sqrt(), rng);
        Self {
            weight: ParamTensor::new(w),
            bias: ParamTensor::new(Tensor::zeros(&[d_out])),
            gamma: ParamTensor::new(Tensor::full(&[d_out], 1.0)),
            beta: ParamTensor::new(Tensor::zeros(&[d_out])),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}.linear.weight"), &mut self.weight);
        f(&format!("{prefix}.linear.bias"), &mut self.bias);
        f(&format!("{prefix}.bn.gamma"), &mut self.gamma);
        f(&format!("{prefix}.bn.beta"), &mut self.beta);
    }
}

/// One application of an embedding. Running statistics belong to the
/// application, not to the (possibly shared) weights.
#[derive(Debug, Clone)]
struct EmbedUnit {
    source: Source,
    params: usize,
    stats: RunningStats,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    input: ClassifierInput,
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Classifier {
    fn new<R: Rng + ?Sized>(input: ClassifierInput, d_in: usize, n_id: usize, rng: &mut R) -> Self {
        Self {
            input,
            weight: ParamTensor::new(Tensor::randn(&[n_id, d_in], CLASSIFIER_INIT_STD, rng)),
            bias: ParamTensor::new(Tensor::zeros(&[n_id])),
        }
    }
}

/// Transformed per-branch features of a batch, in group order.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    /// One B×D tensor per channel-path embedding.
    pub groups: Vec<Tensor>,
    /// One B×D tensor per horizontal stripe (empty without a part head).
    pub stripes: Vec<Tensor>,
}

impl DescriptorSet {
    pub fn batch(&self) -> usize {
        self.groups[0].dim(0)
    }

    /// All groups then all stripes, concatenated.
    pub fn standard(&self) -> Tensor {
        let parts: Vec<&Tensor> = self.groups.iter().chain(&self.stripes).collect();
        Tensor::concat_columns(&parts).expect("descriptor groups share the batch size")
    }

    pub fn standard_dim(&self) -> usize {
        self.groups.iter().chain(&self.stripes).map(|g| g.dim(1)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Vec<Tensor>,
    pub descriptors: DescriptorSet,
}

#[derive(Debug, Clone)]
struct UnitCache {
    input: Tensor,
    bn: BatchNormCache,
    pre_relu: Tensor,
}

#[derive(Debug, Clone)]
struct HeadCache {
    maps_shape: Option<Vec<usize>>,
    units: Vec<UnitCache>,
    classifier_inputs: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Head {
    spec: HeadSpec,
    pub embeds: Vec<EmbedParams>,
    units: Vec<EmbedUnit>,
    pub classifiers: Vec<Classifier>,
    /// First index into `embeds`/`units`/`classifiers` that belongs to the stripe head.
    stripe_start: (usize, usize, usize),
    cache: Option<HeadCache>,
}

impl Head {
    /// Initializes embeddings (He-normal) then classifiers in branch order,
    /// then the stripe branches.
    pub fn new<R: Rng + ?Sized>(spec: &HeadSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let layout = spec.layout();
        let mut embeds: Vec<EmbedParams> = (0..layout.param_sets)
            .map(|_| EmbedParams::new(spec.embed_in(), d, rng))
            .collect();
        let mut units: Vec<EmbedUnit> = layout
            .units
            .iter()
            .map(|&(source, params)| EmbedUnit {
                source,
                params,
                stats: RunningStats::new(d),
            })
            .collect();
        let mut classifiers: Vec<Classifier> = layout
            .classifiers
            .iter()
            .map(|&input| {
                let d_in = match input {
                    ClassifierInput::Embed(_) => d,
                    ClassifierInput::Concat => units.len() * d,
                };
                Classifier::new(input, d_in, spec.n_id, rng)
            })
            .collect();
        let stripe_start = (embeds.len(), units.len(), classifiers.len());
        for s in 0..spec.part_stripes {
            embeds.push(EmbedParams::new(spec.c_total, d, rng));
            units.push(EmbedUnit {
                source: Source::Stripe(s),
                params: embeds.len() - 1,
                stats: RunningStats::new(d),
            });
            let unit = units.len() - 1;
            classifiers.push(Classifier::new(ClassifierInput::Embed(unit), d, spec.n_id, rng));
        }
        Ok(Self {
            spec: spec.clone(),
            embeds,
            units,
            classifiers,
            stripe_start,
            cache: None,
        })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    /// Full head on backbone feature maps (N×C×H×W): global pooling, the
    /// channel-group path and, when enabled, the stripe path.
    pub fn forward(&mut self, maps: &Tensor, mode: Mode) -> Result<HeadOutput> {
        let pooled = global_avg_pool(maps)?;
        let stripes = if self.spec.part_stripes > 0 {
            stripe_pool(maps, self.spec.part_stripes)?
        } else {
            Vec::new()
        };
        let out = self.forward_inner(&pooled, &stripes, mode)?;
        if let Some(cache) = self.cache.as_mut() {
            cache.maps_shape = Some(maps.shape().to_vec());
        }
        Ok(out)
    }

    /// Channel-group path only, on an already pooled B×C feature.
    pub fn forward_features(&mut self, features: &Tensor, mode: Mode) -> Result<HeadOutput> {
        if self.spec.part_stripes > 0 {
            return Err(Error::InvalidInput(
                "head has a stripe path; use forward with feature maps".into(),
            ));
        }
        self.forward_inner(features, &[], mode)
    }

    fn forward_inner(&mut self, features: &Tensor, stripes: &[Tensor], mode: Mode) -> Result<HeadOutput> {
        if features.rank() != 2 || features.dim(1) != self.spec.c_total {
            return Err(Error::shape(
                "head_forward",
                "feature channels",
                self.spec.c_total,
                features.shape().get(1).copied().unwrap_or(0),
            ));
        }
        let groups = match self.spec.variant {
            Variant::A | Variant::C => slice_channel_groups(features, self.spec.n_c)?,
            _ => Vec::new(),
        };
        let mut unit_caches = Vec::with_capacity(self.units.len());
        let mut activations = Vec::with_capacity(self.units.len());
        for unit in &mut self.units {
            let input = match unit.source {
                Source::Group(i) => groups[i].clone(),
                Source::Full => features.clone(),
                Source::Stripe(s) => stripes[s].clone(),
            };
            let p = &self.embeds[unit.params];
            let z = linear_forward(&input, &p.weight.value, &p.bias.value)?;
            let (y, bn) = batchnorm1d(
                &z,
                &p.gamma.value,
                &p.beta.value,
                &mut unit.stats,
                mode,
                BN_MOMENTUM,
                BN_EPSILON,
            )?;
            activations.push(relu(&y));
            unit_caches.push(UnitCache {
                input,
                bn,
                pre_relu: y,
            });
        }
        let mut logits = Vec::with_capacity(self.classifiers.len());
        let mut classifier_inputs = Vec::with_capacity(self.classifiers.len());
        for c in &self.classifiers {
            let x = match c.input {
                ClassifierInput::Embed(u) => activations[u].clone(),
                ClassifierInput::Concat => {
                    let parts: Vec<&Tensor> = activations[..self.stripe_start.1].iter().collect();
                    Tensor::concat_columns(&parts)?
                }
            };
            logits.push(linear_forward(&x, &c.weight.value, &c.bias.value)?);
            classifier_inputs.push(x);
        }
        self.cache = (mode == Mode::Train).then(|| HeadCache {
            maps_shape: None,
            units: unit_caches,
            classifier_inputs,
        });
        let stripes = activations.split_off(self.stripe_start.1);
        Ok(HeadOutput {
            logits,
            descriptors: DescriptorSet {
                groups: activations,
                stripes,
            },
        })
    }

    /// Backward of `forward_features`: returns the gradient with respect to `F`.
    ///
    /// `grad_logits` holds one gradient per branch; `grad_descriptor`, when
    /// given, is the gradient with respect to the standard (concatenated)
    /// descriptor.
    pub fn backward_features(&mut self, grad_logits: &[Tensor], grad_descriptor: Option<&Tensor>) -> Result<Tensor> {
        let (grad_f, _) = self.backward_inner(grad_logits, grad_descriptor)?;
        Ok(grad_f)
    }

    /// Backward of `forward`: returns the gradient with respect to the feature maps.
    pub fn backward(&mut self, grad_logits: &[Tensor], grad_descriptor: Option<&Tensor>) -> Result<Tensor> {
        let shape = self
            .cache
            .as_ref()
            .and_then(|c| c.maps_shape.clone())
            .ok_or(Error::MissingCache("head_backward"))?;
        let (grad_f, grad_stripes) = self.backward_inner(grad_logits, grad_descriptor)?;
        let mut grad = global_avg_pool_backward(&grad_f, &shape)?;
        if !grad_stripes.is_empty() {
            grad.add_assign(&stripe_pool_backward(&grad_stripes, &shape)?);
        }
        Ok(grad)
    }

    fn backward_inner(
        &mut self,
        grad_logits: &[Tensor],
        grad_descriptor: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let cache = self.cache.take().ok_or(Error::MissingCache("head_backward"))?;
        if grad_logits.len() != self.classifiers.len() {
            return Err(Error::shape(
                "head_backward",
                "branch count",
                self.classifiers.len(),
                grad_logits.len(),
            ));
        }
        let batch = cache.units[0].input.dim(0);
        let d = self.spec.embed_dim;
        let mut grad_act: Vec<Tensor> = (0..self.units.len()).map(|_| Tensor::zeros(&[batch, d])).collect();

        if let Some(gd) = grad_descriptor {
            let expected = self.units.len() * d;
            if gd.rank() != 2 || gd.dim(1) != expected || gd.dim(0) != batch {
                return Err(Error::shape("head_backward", "descriptor gradient width", expected, gd.len() / batch));
            }
            for (u, g) in grad_act.iter_mut().enumerate() {
                g.add_assign(&gd.columns(u * d, d));
            }
        }

        let n_channel_units = self.stripe_start.1;
        for ((c, g), x) in self.classifiers.iter_mut().zip(grad_logits).zip(&cache.classifier_inputs) {
            let lg = linear_backward(g, x, &c.weight.value)?;
            c.weight.accumulate(&lg.weight);
            c.bias.accumulate(&lg.bias);
            match c.input {
                ClassifierInput::Embed(u) => grad_act[u].add_assign(&lg.input),
                ClassifierInput::Concat => {
                    for (u, ga) in grad_act.iter_mut().take(n_channel_units).enumerate() {
                        ga.add_assign(&lg.input.columns(u * d, d));
                    }
                }
            }
        }

        let mut grad_f = Tensor::zeros(&[batch, self.spec.c_total]);
        let mut grad_stripes: Vec<Tensor> = (0..self.spec.part_stripes)
            .map(|_| Tensor::zeros(&[batch, self.spec.c_total]))
            .collect();
        let cg = self.spec.c_group();
        for ((unit, uc), ga) in self.units.iter().zip(&cache.units).zip(&grad_act) {
            let p = &mut self.embeds[unit.params];
            let g = relu_backward(ga, &uc.pre_relu);
            let bn = batchnorm_backward(&g, &uc.bn, &p.gamma.value)?;
            p.gamma.accumulate(&bn.gamma);
            p.beta.accumulate(&bn.beta);
            let lg = linear_backward(&bn.input, &uc.input, &p.weight.value)?;
            p.weight.accumulate(&lg.weight);
            p.bias.accumulate(&lg.bias);
            match unit.source {
                Source::Group(i) => grad_f.add_columns(i * cg, &lg.input),
                Source::Full => grad_f.add_assign(&lg.input),
                Source::Stripe(s) => grad_stripes[s].add_assign(&lg.input),
            }
        }
        Ok((grad_f, grad_stripes))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        let (e0, _, c0) = self.stripe_start;
        for (i, e) in self.embeds.iter_mut().enumerate() {
            if i < e0 {
                e.visit(&format!("head.embed{i}"), f);
            } else {
                e.visit(&format!("head.stripe{}.embed", i - e0), f);
            }
        }
        for (i, c) in self.classifiers.iter_mut().enumerate() {
            let prefix = if i < c0 {
                format!("head.classifier{i}")
            } else {
                format!("head.stripe{}.classifier", i - c0)
            };
            f(&format!("{prefix}.weight"), &mut c.weight);
            f(&format!("{prefix}.bias"), &mut c.bias);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let u0 = self.stripe_start.1;
        for (i, u) in self.units.iter_mut().enumerate() {
            let prefix = if i < u0 {
                format!("head.unit{i}.bn")
            } else {
                format!("head.stripe{}.bn", i - u0)
            };
            f(&format!("{prefix}.running_mean"), &mut u.stats.mean);
            f(&format!("{prefix}.running_var"), &mut u.stats.var);
        }
    }
}

/// Total loss and its decomposition over branches.
#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub total: f64,
    pub per_branch: Vec<f64>,
    /// Gradient of `total` with respect to each branch's logits.
    pub grads: Vec<Tensor>,
}

/// Sum over branches of the batch-mean cross-entropy of each branch.
pub fn head_loss(logits: &[Tensor], labels: &[usize]) -> Result<HeadLoss> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("head_loss needs at least one branch".into()));
    }
    let mut per_branch = Vec::with_capacity(logits.len());
    let mut grads = Vec::with_capacity(logits.len());
    for l in logits {
        let ce = softmax_cross_entropy(l, labels)?;
        per_branch.push(ce.mean());
        let mut g = ce.grad;
        g.scale(1.0 / labels.len() as f64);
        grads.push(g);
    }
    Ok(HeadLoss {
        total: per_branch.iter().sum(),
        per_branch,
        grads,
    })
}

//! Deterministic training loop and the variant-comparison grid.

mod grid;
mod log;

pub use grid::{cell_specs, compare_variants, run_cell, CellResult, CellSpec, GridResult, GridSpec, MetricSummary, ProductSpec, RunResult, GRID_SCHEMA_VERSION};
pub use log::{EvalSnapshot, StepRecord, TrainLog};

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset, PkBatchSpec, PkSampler, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Setting};
use crate::head::head_loss;
use crate::model::{Model, ModelSpec};
use crate::seed;
use crate::tensor::{sgd_step, Mode, SgdConfig, Tensor};
use crate::triplet::{triplet_hard_loss, TripletConfig};

/// Losses above this count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Sum of the per-branch cross-entropies.
    Classification,
    /// Batch-hard triplet loss on the standard descriptor.
    Triplet,
    Both,
}

impl LossMode {
    fn uses_classification(self) -> bool {
        matches!(self, LossMode::Classification | LossMode::Both)
    }

    fn uses_triplet(self) -> bool {
        matches!(self, LossMode::Triplet | LossMode::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrDecay {
    pub factor: f64,
    /// Epochs (zero-based) at which the rate is multiplied by `factor`.
    /// `None` means a single drop at two thirds of training.
    pub milestones: Option<Vec<usize>>,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            factor: 0.1,
            milestones: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pk: PkBatchSpec,
    pub loss_mode: LossMode,
    pub triplet: TripletConfig,
    /// Random flip and padded crop on training images.
    pub augment: bool,
    /// Fraction of training labels replaced by a wrong identity.
    pub label_noise: f64,
    /// Evaluate on the test split every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Fraction of each identity's training images held out to track
    /// classification accuracy; 0 disables.
    pub val_fraction: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.01,
            lr_decay: LrDecay::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            pk: PkBatchSpec::default(),
            loss_mode: LossMode::Classification,
            triplet: TripletConfig::default(),
            augment: true,
            label_noise: 0.0,
            eval_every: 0,
            val_fraction: 0.0,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn milestones(&self) -> Vec<usize> {
        match &self.lr_decay.milestones {
            Some(m) => m.clone(),
            None => vec![(2 * self.epochs).div_ceil(3)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidSpec("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidSpec(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if self.milestones().windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("lr milestones must be strictly increasing".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidSpec("label_noise and val_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidSpec("momentum must be in [0, 1) and weight_decay non-negative".into()));
        }
        self.pk.validate()?;
        if self.triplet.margin < 0.0 {
            return Err(Error::InvalidSpec("triplet margin must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones().iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.factor.powi(drops as i32)
    }
}

/// Loss values of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub per_branch: Vec<f64>,
    pub classification: Option<f64>,
    pub triplet: Option<f64>,
}

/// Zeroes the gradients, then runs a train-mode forward and backward pass on
/// one batch, leaving the gradients of the selected loss in the model.
pub fn compute_gradients(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    mode: LossMode,
    triplet: &TripletConfig,
) -> Result<BatchLoss> {
    model.zero_grad();
    let out = model.forward(images, Mode::Train)?;
    let mut total = 0.0;
    let (mut classification, mut per_branch, mut triplet_loss) = (None, Vec::new(), None);
    let grad_logits = if mode.uses_classification() {
        let hl = head_loss(&out.logits, labels)?;
        total += hl.total;
        classification = Some(hl.total);
        per_branch = hl.per_branch;
        hl.grads
    } else {
        out.logits.iter().map(|l| Tensor::zeros(l.shape())).collect()
    };
    let grad_descriptor = if mode.uses_triplet() {
        let t = triplet_hard_loss(&out.descriptors.standard(), labels, triplet)?;
        total += t.loss;
        triplet_loss = Some(t.loss);
        Some(t.grad)
    } else {
        None
    };
    model.backward(&grad_logits, grad_descriptor.as_ref())?;
    Ok(BatchLoss {
        total,
        per_branch,
        classification,
        triplet: triplet_loss,
    })
}

/// Training and held-out sample indices with their (possibly noisy) labels.
struct Pools {
    train: Vec<(usize, usize)>,
    val: Vec<(usize, usize)>,
}

fn build_pools(ds: &Dataset, spec: &TrainSpec) -> Result<Pools> {
    use rand::seq::SliceRandom;
    let mut data = ds.clone();
    data.corrupt_train_labels(spec.label_noise, spec.seed);
    let label_of: HashMap<usize, usize> = ds.train_ids.iter().enumerate().map(|(l, &id)| (id, l)).collect();
    let mut by_true_id: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in ds.indices(Split::Train) {
        by_true_id.entry(ds.samples[i].identity).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut rng = seed::rng(seed::derive(spec.seed, "val-split"));
    for &id in &ds.train_ids {
        let mut idx = by_true_id.remove(&id).unwrap_or_default();
        let n_val = (spec.val_fraction * idx.len() as f64).floor() as usize;
        if n_val > 0 {
            idx.shuffle(&mut rng);
        }
        for (j, &i) in idx.iter().enumerate() {
            let label = *label_of.get(&data.samples[i].identity).ok_or_else(|| {
                Error::InvalidInput(format!("sample {i} has a label outside the training identities"))
            })?;
            if j < n_val {
                // held-out accuracy is measured against the true identity
                val.push((i, label_of[&id]));
            } else {
                train.push((i, label));
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Pools { train, val })
}

/// Fraction of held-out images whose summed branch logits peak at the true label.
fn held_out_accuracy(model: &Model, ds: &Dataset, val: &[(usize, usize)]) -> Result<f64> {
    let idx: Vec<usize> = val.iter().map(|&(i, _)| i).collect();
    let mut net = model.clone();
    let out = net.forward(&ds.images(&idx), Mode::Eval)?;
    let mut correct = 0;
    for (r, &(_, label)) in val.iter().enumerate() {
        let n_id = out.logits[0].dim(1);
        let mut sum = vec![0.0; n_id];
        for l in &out.logits {
            for (s, v) in sum.iter_mut().zip(l.row(r)) {
                *s += v;
            }
        }
        let best = (0..n_id).fold(0, |b, c| if sum[c] > sum[b] { c } else { b });
        correct += usize::from(best == label);
    }
    Ok(correct as f64 / val.len() as f64)
}

/// Trains a freshly initialized model. Deterministic in (`model_spec`,
/// `data`, `spec`, `init_seed`); only `TrainLog::wall_time_secs` varies.
pub fn train(model_spec: &ModelSpec, data: &Dataset, spec: &TrainSpec, init_seed: u64) -> Result<(Model, TrainLog)> {
    spec.validate()?;
    model_spec.validate()?;
    if model_spec.head.n_id != data.n_train_ids() {
        return Err(Error::InvalidSpec(format!(
            "head has {} classes but the data has {} training identities",
            model_spec.head.n_id,
            data.n_train_ids()
        )));
    }
    let (h, w) = data.spec.image_hw;
    if model_spec.backbone.input_hw != (h, w) {
        return Err(Error::InvalidSpec(format!(
            "backbone expects {:?} images but the data has {h}x{w}",
            model_spec.backbone.input_hw
        )));
    }
    let mut model = Model::new(model_spec, init_seed)?;
    let started = Instant::now();
    let pools = build_pools(data, spec)?;
    let sampler = PkSampler::new(&pools.train, spec.pk, seed::derive(spec.seed, "sampler"))?;
    let mut log = TrainLog::default();

    for epoch in 0..spec.epochs {
        let lr = spec.lr_at(epoch);
        let sgd = SgdConfig {
            lr,
            momentum: spec.momentum,
            weight_decay: spec.weight_decay,
        };
        let aug_seed = seed::derive_indexed(spec.seed, "augment", epoch as u64);
        for (step, batch) in sampler.epoch(epoch).into_iter().enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&(_, l)| l).collect();
            let imgs: Vec<Tensor> = batch
                .iter()
                .enumerate()
                .map(|(slot, &(i, _))| {
                    let img = &data.samples[i].image;
                    if spec.augment {
                        let s = seed::derive_indexed(aug_seed, "slot", (step * batch.len() + slot) as u64);
                        augment(img, s)
                    } else {
                        img.clone()
                    }
                })
                .collect();
            let images = Tensor::stack(&imgs.iter().collect::<Vec<_>>())?;
            let loss = compute_gradients(&mut model, &images, &labels, spec.loss_mode, &spec.triplet)?;
            if !loss.total.is_finite() || loss.total > DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: loss.total,
                });
            }
            model.visit_params(&mut |_, p| sgd_step([p], sgd));
            log.steps.push(StepRecord {
                epoch,
                step,
                lr,
                total: loss.total,
                per_branch: loss.per_branch,
                classification: loss.classification,
                triplet: loss.triplet,
            });
        }
        let last = epoch + 1 == spec.epochs;
        if spec.eval_every > 0 && ((epoch + 1) % spec.eval_every == 0 || last) {
            let report = evaluate(&model, data, Setting::Standard, None)?;
            let val_accuracy = if pools.val.is_empty() {
                None
            } else {
                Some(held_out_accuracy(&model, data, &pools.val)?)
            };
            log.evals.push(EvalSnapshot {
                epoch,
                report,
                val_accuracy,
            });
        }
    }
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((model, log))
}

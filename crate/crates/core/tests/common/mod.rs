//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use cgreid::backbone::BackboneSpec;
use cgreid::eval::ImageMeta;
use cgreid::head::{head_loss, stripe_pool, stripe_pool_backward, HeadSpec, Variant};
use cgreid::model::{Model, ModelSpec};
use cgreid::seed;
use cgreid::tensor::*;
use cgreid::triplet::{triplet_hard_loss, TripletConfig};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradient norm treated as zero when both sides fall below it.
pub const ZERO_GRAD: f64 = 1e-8;

/// CMC and mAP without sorting: an item's rank is the number of valid items
/// that beat it on (distance, index). Returns `None` when no query has a
/// valid correct match.
pub fn brute_force_scores(
    dist: &[Vec<f64>],
    qm: &[ImageMeta],
    gm: &[ImageMeta],
    k_max: usize,
) -> Option<(Vec<f64>, f64, usize)> {
    let mut cmc = vec![0.0; k_max];
    let mut ap_total = 0.0;
    let mut scored = 0;
    for (q, row) in dist.iter().enumerate() {
        let valid: Vec<usize> = (0..gm.len())
            .filter(|&g| !(gm[g].identity == qm[q].identity && gm[g].camera == qm[q].camera))
            .collect();
        let beats = |a: usize, b: usize| row[a] < row[b] || (row[a] == row[b] && a < b);
        let rank_of = |g: usize| valid.iter().filter(|&&o| o != g && beats(o, g)).count();
        let correct: Vec<usize> = valid.iter().copied().filter(|&g| gm[g].identity == qm[q].identity).collect();
        if correct.is_empty() {
            continue;
        }
        scored += 1;
        let mut ap = 0.0;
        for &c in &correct {
            let r = rank_of(c);
            let correct_up_to = correct.iter().filter(|&&o| rank_of(o) <= r).count();
            ap += correct_up_to as f64 / (r + 1) as f64;
        }
        ap_total += ap / correct.len() as f64;
        let first = correct.iter().map(|&c| rank_of(c)).min().unwrap();
        for (k, v) in cmc.iter_mut().enumerate() {
            if first <= k {
                *v += 1.0;
            }
        }
    }
    if scored == 0 {
        return None;
    }
    Some((cmc.iter().map(|v| v / scored as f64).collect(), ap_total / scored as f64, scored))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Batch-hard loss as the worst hinge over every (positive, negative) pair of
/// each anchor, averaged over anchors that have a positive.
pub fn exhaustive_triplet(emb: &Tensor, labels: &[usize], margin: f64) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..b {
        let mut worst: Option<f64> = None;
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                let h = (margin + euclid(emb.row(a), emb.row(p)) - euclid(emb.row(a), emb.row(n))).max(0.0);
                worst = Some(worst.map_or(h, |w: f64| w.max(h)));
            }
        }
        if let Some(w) = worst {
            total += w;
            anchors += 1;
        }
    }
    total / anchors as f64
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    /// Tensors whose gradient is zero on both sides (within `ZERO_GRAD`).
    pub zero_grad_tensors: usize,
}

impl GradCheck {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            trials: 0,
            worst: 0.0,
            zero_grad_tensors: 0,
        }
    }

    fn record(&mut self, analytic: &Tensor, numeric: &Tensor) {
        // Biases feeding a train-mode batch norm have an exactly zero
        // gradient; there both sides are rounding noise and the relative
        // error means nothing, so they are held to an absolute bound.
        if norm(analytic) < ZERO_GRAD && norm(numeric) < ZERO_GRAD {
            self.zero_grad_tensors += 1;
            return;
        }
        self.worst = self.worst.max(relative_error(analytic, numeric));
    }
}

fn norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Inputs bounded away from zero so ReLU kinks stay out of the FD stencil.
fn away_from_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Central-difference checks of every differentiable op, `trials` seeded
/// cases each; the scalar is a random projection of the op's output.
pub fn per_op_gradient_suite(trials: usize) -> Vec<GradCheck> {
    let mut conv = GradCheck::new("conv2d");
    let mut linear = GradCheck::new("linear");
    let mut bn1 = GradCheck::new("batchnorm1d");
    let mut bn2 = GradCheck::new("batchnorm2d");
    let mut relu_c = GradCheck::new("relu");
    let mut gap = GradCheck::new("global_avg_pool");
    let mut ce = GradCheck::new("softmax_cross_entropy");
    let mut trip = GradCheck::new("triplet_hard");
    let mut stripe = GradCheck::new("stripe_pool");
    for t in 0..trials {
        let mut rng = seed::rng(seed::derive_indexed(11, "grad-op", t as u64));

        let (stride, pad) = [(1, 1), (2, 1), (1, 0), (2, 0)][t % 4];
        let x = Tensor::randn(&[2, 2, 6, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.5, &mut rng);
        let y = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
        let r = Tensor::randn(y.shape(), 1.0, &mut rng);
        let g = conv2d_backward(&r, &x, &w, stride, pad).unwrap();
        conv.record(&g.input, &finite_diff_grad(|v| dot(&conv2d_forward(v, &w, &b, stride, pad).unwrap(), &r), &x, FD_STEP));
        conv.record(&g.weight, &finite_diff_grad(|v| dot(&conv2d_forward(&x, v, &b, stride, pad).unwrap(), &r), &w, FD_STEP));
        conv.record(&g.bias, &finite_diff_grad(|v| dot(&conv2d_forward(&x, &w, v, stride, pad).unwrap(), &r), &b, FD_STEP));
        conv.trials += 1;

        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let r = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let g = linear_backward(&r, &x, &w).unwrap();
        linear.record(&g.input, &finite_diff_grad(|v| dot(&linear_forward(v, &w, &b).unwrap(), &r), &x, FD_STEP));
        linear.record(&g.weight, &finite_diff_grad(|v| dot(&linear_forward(&x, v, &b).unwrap(), &r), &w, FD_STEP));
        linear.record(&g.bias, &finite_diff_grad(|v| dot(&linear_forward(&x, &w, v).unwrap(), &r), &b, FD_STEP));
        linear.trials += 1;

        for (check, shape) in [(&mut bn1, vec![6, 4]), (&mut bn2, vec![3, 4, 2, 3])] {
            let c = shape[1];
            let x = Tensor::randn(&shape, 1.5, &mut rng);
            let gamma = Tensor::uniform(&[c], 0.5, 1.5, &mut rng);
            let beta = Tensor::randn(&[c], 0.5, &mut rng);
            let mode = if t % 5 == 4 { Mode::Eval } else { Mode::Train };
            let mut stats = RunningStats::new(c);
            stats.mean = Tensor::randn(&[c], 0.3, &mut rng);
            stats.var = Tensor::uniform(&[c], 0.5, 2.0, &mut rng);
            let run = |x: &Tensor, g: &Tensor, bt: &Tensor| {
                let mut s = stats.clone();
                if shape.len() == 2 {
                    batchnorm1d(x, g, bt, &mut s, mode, BN_MOMENTUM, BN_EPSILON).unwrap()
                } else {
                    batchnorm2d(x, g, bt, &mut s, mode, BN_MOMENTUM, BN_EPSILON).unwrap()
                }
            };
            let (y, cache) = run(&x, &gamma, &beta);
            let r = Tensor::randn(y.shape(), 1.0, &mut rng);
            let g = batchnorm_backward(&r, &cache, &gamma).unwrap();
            check.record(&g.input, &finite_diff_grad(|v| dot(&run(v, &gamma, &beta).0, &r), &x, FD_STEP));
            check.record(&g.gamma, &finite_diff_grad(|v| dot(&run(&x, v, &beta).0, &r), &gamma, FD_STEP));
            check.record(&g.beta, &finite_diff_grad(|v| dot(&run(&x, &gamma, v).0, &r), &beta, FD_STEP));
            check.trials += 1;
        }

        let x = away_from_zero(&[3, 7], &mut rng);
        let r = Tensor::randn(&[3, 7], 1.0, &mut rng);
        relu_c.record(&relu_backward(&r, &x), &finite_diff_grad(|v| dot(&relu(v), &r), &x, FD_STEP));
        relu_c.trials += 1;

        let x = Tensor::randn(&[2, 3, 4, 3], 1.0, &mut rng);
        let r = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let g = global_avg_pool_backward(&r, x.shape()).unwrap();
        gap.record(&g, &finite_diff_grad(|v| dot(&global_avg_pool(v).unwrap(), &r), &x, FD_STEP));
        gap.trials += 1;

        let logits = Tensor::randn(&[5, 4], 2.0, &mut rng);
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        let out = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut g = out.grad.clone();
        g.scale(1.0 / 5.0);
        ce.record(&g, &finite_diff_grad(|v| softmax_cross_entropy(v, &labels).unwrap().mean(), &logits, FD_STEP));
        ce.trials += 1;

        let emb = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let cfg = TripletConfig {
            margin: 2.0,
            soft_margin: t % 2 == 1,
        };
        let out = triplet_hard_loss(&emb, &labels, &cfg).unwrap();
        trip.record(&out.grad, &finite_diff_grad(|v| triplet_hard_loss(v, &labels, &cfg).unwrap().loss, &emb, FD_STEP));
        trip.trials += 1;

        let maps = Tensor::randn(&[2, 3, 4, 2], 1.0, &mut rng);
        let rs: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng)).collect();
        let g = stripe_pool_backward(&rs, maps.shape()).unwrap();
        let f = |v: &Tensor| stripe_pool(v, 2).unwrap().iter().zip(&rs).map(|(s, r)| dot(s, r)).sum::<f64>();
        stripe.record(&g, &finite_diff_grad(f, &maps, FD_STEP));
        stripe.trials += 1;
    }
    vec![conv, linear, bn1, bn2, relu_c, gap, ce, trip, stripe]
}

pub fn tiny_backbone() -> BackboneSpec {
    BackboneSpec {
        stage_channels: vec![3, 8],
        stage_strides: vec![2, 2],
        last_stride: 1,
        kernel: 3,
        input_hw: (8, 4),
    }
}

pub fn tiny_model_spec(variant: Variant, n_c: usize, shared: bool, stripes: usize) -> ModelSpec {
    ModelSpec {
        backbone: tiny_backbone(),
        head: HeadSpec {
            variant,
            n_c,
            c_total: 8,
            embed_dim: 3,
            n_id: 3,
            shared_embed: shared,
            part_stripes: stripes,
        }
        .normalized(),
    }
}

fn batch_loss(model: &mut Model, images: &Tensor, labels: &[usize]) -> f64 {
    let out = model.forward(images, Mode::Train).unwrap();
    head_loss(&out.logits, labels).unwrap().total
}

/// Backbone + head + summed branch cross-entropy against central differences,
/// with respect to the input images and every parameter.
pub fn composite_gradient_suite(trials: usize) -> GradCheck {
    let mut check = GradCheck::new("backbone+head+loss");
    let configs = [
        (Variant::A, 4, true, 0),
        (Variant::A, 2, false, 0),
        (Variant::B, 1, true, 0),
        (Variant::C, 4, true, 0),
        (Variant::D, 2, false, 0),
        (Variant::E, 2, false, 0),
        (Variant::E, 2, true, 0),
        (Variant::A, 4, true, 2),
        (Variant::D, 4, true, 0),
        (Variant::C, 2, false, 0),
    ];
    for t in 0..trials {
        let (variant, n_c, shared, stripes) = configs[t % configs.len()];
        let spec = tiny_model_spec(variant, n_c, shared, stripes);
        let mut rng = seed::rng(seed::derive_indexed(12, "grad-model", t as u64));
        let mut model = Model::new(&spec, t as u64).unwrap();
        // larger classifier weights than the default init give non-trivial logits
        model.visit_params(&mut |name, p| {
            if name.contains("classifier") && name.ends_with("weight") {
                p.value = Tensor::randn(p.value.shape(), 0.5, &mut rng);
            }
        });
        let images = Tensor::randn(&[4, 3, 8, 4], 1.0, &mut rng);
        let labels = [0, 1, 2, 1];

        model.zero_grad();
        let out = model.forward(&images, Mode::Train).unwrap();
        let loss = head_loss(&out.logits, &labels).unwrap();
        let grad_images = model.backward(&loss.grads, None).unwrap();
        let fd = finite_diff_grad(|v| batch_loss(&mut model.clone(), v, &labels), &images, FD_STEP);
        check.record(&grad_images, &fd);

        let mut named = Vec::new();
        model.visit_params(&mut |n, p| named.push((n.to_string(), p.value.clone(), p.grad.clone())));
        for (name, value, grad) in named {
            let fd = finite_diff_grad(
                |v| {
                    let mut m = model.clone();
                    m.visit_params(&mut |n, p| {
                        if n == name {
                            p.value = v.clone();
                        }
                    });
                    batch_loss(&mut m, &images, &labels)
                },
                &value,
                FD_STEP,
            );
            check.record(&grad, &fd);
        }
        check.trials += 1;
    }
    check
}

pub fn meta(identity: usize, camera: u8) -> ImageMeta {
    ImageMeta { identity, camera }
}

//! Batch-hard triplet loss, the metric-learning baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_rank, Tensor};

/// Pairs closer than this get a zero distance gradient.
const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin: f64,
    pub soft_margin: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            soft_margin: false,
        }
    }
}

/// Hardest positive and negative chosen for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HardPair {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad: Tensor,
    /// `None` for anchors without any positive in the batch.
    pub selections: Vec<Option<HardPair>>,
}

pub fn pairwise_distances(x: &Tensor) -> Vec<Vec<f64>> {
    let b = x.dim(0);
    let mut d = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in i + 1..b {
            let sq: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, c)| (a - c) * (a - c)).sum();
            d[i][j] = sq.sqrt();
            d[j][i] = d[i][j];
        }
    }
    d
}

/// For each anchor: the farthest same-label sample and the closest
/// different-label sample (Euclidean), hinge `max(0, margin + d_p − d_n)`,
/// averaged over anchors that have a positive. Ties go to the lowest index.
pub fn triplet_hard_loss(embeddings: &Tensor, labels: &[usize], cfg: &TripletConfig) -> Result<TripletLoss> {
    check_rank("triplet_hard_loss", embeddings, 2)?;
    let b = embeddings.dim(0);
    if labels.len() != b {
        return Err(Error::shape("triplet_hard_loss", "label count", b, labels.len()));
    }
    if cfg.margin < 0.0 {
        return Err(Error::InvalidInput(format!("margin must be non-negative, got {}", cfg.margin)));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidInput("triplet loss needs at least two identities in the batch".into()));
    }
    let dist = pairwise_distances(embeddings);

    let mut selections = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dist[a][j] > dist[a][p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| dist[a][j] < dist[a][n]) {
                neg = Some(j);
            }
        }
        selections.push(pos.zip(neg).map(|(positive, negative)| HardPair { positive, negative }));
    }
    let anchors = selections.iter().flatten().count();
    if anchors == 0 {
        return Err(Error::InvalidInput("no anchor has a positive in the batch".into()));
    }

    let d = embeddings.dim(1);
    let mut grad = Tensor::zeros(&[b, d]);
    let mut total = 0.0;
    let scale = 1.0 / anchors as f64;
    let push_pair = |grad: &mut Tensor, i: usize, j: usize, w: f64| {
        let dij = dist[i][j];
        if dij <= DIST_EPS {
            return;
        }
        for k in 0..d {
            let g = w * (embeddings.row(i)[k] - embeddings.row(j)[k]) / dij;
            grad.row_mut(i)[k] += g;
            grad.row_mut(j)[k] -= g;
        }
    };
    for (a, sel) in selections.iter().enumerate() {
        let Some(HardPair { positive, negative }) = *sel else {
            continue;
        };
        let gap = dist[a][positive] - dist[a][negative];
        let (loss, slope) = if cfg.soft_margin {
            // softplus(gap), slope sigmoid(gap)
            let sp = if gap > 0.0 { gap + (-gap).exp().ln_1p() } else { gap.exp().ln_1p() };
            (sp, 1.0 / (1.0 + (-gap).exp()))
        } else {
            let h = cfg.margin + gap;
            if h > 0.0 {
                (h, 1.0)
            } else {
                (0.0, 0.0)
            }
        };
        total += loss;
        if slope > 0.0 {
            push_pair(&mut grad, a, positive, slope * scale);
            push_pair(&mut grad, a, negative, -slope * scale);
        }
    }
    Ok(TripletLoss {
        loss: total * scale,
        grad,
        selections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::tensor::{finite_diff_grad, relative_error};

    fn cfg() -> TripletConfig {
        TripletConfig::default()
    }

    #[test]
    fn satisfied_triplets_give_zero() {
        let x = Tensor::new(&[4, 2], vec![0.0, 0.0, 0.1, 0.0, 5.0, 0.0, 5.1, 0.0]).unwrap();
        let t = triplet_hard_loss(&x, &[0, 0, 1, 1], &cfg()).unwrap();
        assert_eq!(t.loss, 0.0);
        assert!(t.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coincident_pairs_closed_form() {
        let r = 0.2;
        let x = Tensor::new(&[4, 1], vec![0.0, 0.0, r, r]).unwrap();
        let t = triplet_hard_loss(&x, &[0, 0, 1, 1], &cfg()).unwrap();
        assert!((t.loss - (0.3 - r)).abs() < 1e-15);
    }

    #[test]
    fn single_identity_rejected() {
        assert!(triplet_hard_loss(&Tensor::zeros(&[3, 2]), &[1, 1, 1], &cfg()).is_err());
        let bad = TripletConfig { margin: -1.0, soft_margin: false };
        assert!(triplet_hard_loss(&Tensor::zeros(&[2, 2]), &[0, 1], &bad).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (s, soft) in [(1u64, false), (2, true), (3, false)] {
            let x = Tensor::randn(&[8, 5], 1.0, &mut seed::rng(s));
            let labels = [0, 0, 0, 0, 1, 1, 1, 1];
            let c = TripletConfig { margin: 1.0, soft_margin: soft };
            let t = triplet_hard_loss(&x, &labels, &c).unwrap();
            let fd = finite_diff_grad(|e| triplet_hard_loss(e, &labels, &c).unwrap().loss, &x, 1e-5);
            assert!(relative_error(&t.grad, &fd) < 1e-5, "soft={soft}");
        }
    }
}

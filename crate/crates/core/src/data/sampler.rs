use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkBatchSpec {
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
}

impl Default for PkBatchSpec {
    fn default() -> Self {
        Self { p: 8, k: 4 }
    }
}

impl PkBatchSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::InvalidSpec(format!(
                "PK batches need p >= 2 and k >= 2, got p={} k={}",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// P×K batch sampler over a labelled pool of sample indices.
///
/// Within an epoch every identity's images are shuffled and cut into chunks
/// of `k`, so images are drawn without replacement; each batch takes one
/// chunk from each of `p` distinct identities, preferring identities with the
/// most chunks left.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_label: BTreeMap<usize, Vec<usize>>,
    pk: PkBatchSpec,
    seed: u64,
}

impl PkSampler {
    /// `pool` pairs a sample index with its (possibly noisy) label.
    pub fn new(pool: &[(usize, usize)], pk: PkBatchSpec, seed_value: u64) -> Result<Self> {
        pk.validate()?;
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(idx, label) in pool {
            by_label.entry(label).or_default().push(idx);
        }
        if let Some((label, v)) = by_label.iter().find(|(_, v)| v.len() < pk.k) {
            return Err(Error::InvalidInput(format!(
                "identity {label} has {} images, fewer than k = {}",
                v.len(),
                pk.k
            )));
        }
        if by_label.len() < pk.p {
            return Err(Error::InvalidInput(format!(
                "{} identities cannot fill batches of p = {}",
                by_label.len(),
                pk.p
            )));
        }
        Ok(Self {
            by_label,
            pk,
            seed: seed_value,
        })
    }

    pub fn n_identities(&self) -> usize {
        self.by_label.len()
    }

    /// Batches of one epoch; each batch is `(sample index, label)` pairs
    /// grouped by identity.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<(usize, usize)>> {
        let mut rng = seed::rng(seed::derive_indexed(self.seed, "pk-epoch", epoch as u64));
        let mut chunks: Vec<(usize, Vec<Vec<usize>>)> = self
            .by_label
            .iter()
            .map(|(&label, idx)| {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                let c: Vec<Vec<usize>> = idx.chunks_exact(self.pk.k).map(|c| c.to_vec()).collect();
                (label, c)
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            chunks.shuffle(&mut rng);
            // stable sort keeps the shuffled order among equal counts
            chunks.sort_by_key(|(_, c)| std::cmp::Reverse(c.len()));
            if chunks.len() < self.pk.p || chunks[self.pk.p - 1].1.is_empty() {
                break;
            }
            let mut batch = Vec::with_capacity(self.pk.batch_size());
            for (label, c) in chunks.iter_mut().take(self.pk.p) {
                let chunk = c.pop().expect("non-empty by the check above");
                batch.extend(chunk.into_iter().map(|i| (i, *label)));
            }
            batches.push(batch);
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn pool(ids: usize, per: usize) -> Vec<(usize, usize)> {
        (0..ids * per).map(|i| (i, i / per)).collect()
    }

    #[test]
    fn batches_have_p_identities_of_k_images() {
        let s = PkSampler::new(&pool(6, 8), PkBatchSpec { p: 2, k: 4 }, 1).unwrap();
        for b in s.epoch(0) {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for (_, l) in &b {
                *counts.entry(*l).or_default() += 1;
            }
            assert_eq!(counts.len(), 2);
            assert!(counts.values().all(|&c| c == 4));
        }
    }

    #[test]
    fn one_epoch_over_eight_ids() {
        let s = PkSampler::new(&pool(8, 4), PkBatchSpec { p: 2, k: 4 }, 3).unwrap();
        let e = s.epoch(0);
        assert_eq!(e.len(), 4);
        let ids: BTreeSet<usize> = e.iter().flatten().map(|(_, l)| *l).collect();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn epoch_draws_without_replacement() {
        let s = PkSampler::new(&pool(5, 8), PkBatchSpec { p: 2, k: 4 }, 9).unwrap();
        let e = s.epoch(2);
        assert_eq!(e.len(), 5);
        let all: Vec<usize> = e.iter().flatten().map(|(i, _)| *i).collect();
        let unique: BTreeSet<usize> = all.iter().copied().collect();
        assert_eq!(all.len(), unique.len());
    }

    #[test]
    fn deterministic_under_seed() {
        let a = PkSampler::new(&pool(8, 8), PkBatchSpec { p: 4, k: 2 }, 5).unwrap();
        let b = PkSampler::new(&pool(8, 8), PkBatchSpec { p: 4, k: 2 }, 5).unwrap();
        assert_eq!(a.epoch(0), b.epoch(0));
        assert_eq!(a.epoch(1), b.epoch(1));
        assert_ne!(a.epoch(0), a.epoch(1));
    }

    #[test]
    fn rejects_small_identities() {
        let mut p = pool(4, 4);
        p.pop();
        assert!(PkSampler::new(&p, PkBatchSpec { p: 2, k: 4 }, 0).is_err());
        assert!(PkSampler::new(&pool(4, 4), PkBatchSpec { p: 2, k: 1 }, 0).is_err());
        assert!(PkSampler::new(&pool(1, 4), PkBatchSpec { p: 2, k: 2 }, 0).is_err());
    }
}

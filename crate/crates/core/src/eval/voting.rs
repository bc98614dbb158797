use serde::{Deserialize, Serialize};

use super::{argsort, is_valid, rank_list, DistanceMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteRule {
    /// Sum of per-group rank positions, ascending.
    #[default]
    Borda,
    /// Number of groups whose first valid item it is, descending.
    Plurality,
}

/// Aggregates per-group rankings into one gallery ordering per query.
/// Remaining ties are broken by `fallback` distance, then gallery index.
pub fn voting_rank(per_group: &[DistanceMatrix], fallback: &DistanceMatrix, rule: VoteRule) -> Result<Vec<Vec<usize>>> {
    if per_group.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "voting needs at least 2 groups, got {}",
            per_group.len()
        )));
    }
    if let Some(i) = per_group.iter().position(|d| !d.same_layout(fallback)) {
        return Err(Error::InvalidInput(format!(
            "distance matrix of group {i} does not match the fallback layout"
        )));
    }
    let g = fallback.n_gallery();
    let mut out = Vec::with_capacity(fallback.n_query());
    for q in 0..fallback.n_query() {
        // lower score ranks first
        let mut score = vec![0.0f64; g];
        for dm in per_group {
            let ranking = rank_list(dm, q);
            match rule {
                VoteRule::Borda => {
                    for (pos, &gi) in ranking.iter().enumerate() {
                        score[gi] += pos as f64;
                    }
                }
                VoteRule::Plurality => {
                    let qm = &dm.query_meta[q];
                    if let Some(&top) = ranking.iter().find(|&&gi| is_valid(qm, &dm.gallery_meta[gi])) {
                        score[top] -= 1.0;
                    }
                }
            }
        }
        let by_fallback = argsort(fallback.row(q));
        let mut order = by_fallback;
        // stable sort keeps the fallback order among equal scores
        order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
        out.push(order);
    }
    Ok(out)
}

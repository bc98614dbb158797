//! Retrieval evaluation: distance matrices, ranking, CMC and mAP, and the
//! descriptor settings used at inference time.

mod io;
mod voting;

pub use io::{read_distance_matrix, write_distance_matrix};
pub use voting::{voting_rank, VoteRule};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::head::DescriptorSet;
use crate::model::Model;
use crate::tensor::{check_rank, Tensor};

pub const EVAL_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_K_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageMeta {
    pub identity: usize,
    pub camera: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    q: usize,
    g: usize,
    /// Row-major Q×G.
    values: Vec<f64>,
    pub query_meta: Vec<ImageMeta>,
    pub gallery_meta: Vec<ImageMeta>,
    /// Multiplications spent per query-gallery pair.
    pub ops_per_pair: usize,
}

impl DistanceMatrix {
    pub fn from_values(
        q: usize,
        g: usize,
        values: Vec<f64>,
        query_meta: Vec<ImageMeta>,
        gallery_meta: Vec<ImageMeta>,
        ops_per_pair: usize,
    ) -> Result<Self> {
        if values.len() != q * g {
            return Err(Error::shape("distance matrix", "values", q * g, values.len()));
        }
        if query_meta.len() != q {
            return Err(Error::shape("distance matrix", "query meta", q, query_meta.len()));
        }
        if gallery_meta.len() != g {
            return Err(Error::shape("distance matrix", "gallery meta", g, gallery_meta.len()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidInput(format!("distance {v} is not a non-negative number")));
        }
        Ok(Self {
            q,
            g,
            values,
            query_meta,
            gallery_meta,
            ops_per_pair,
        })
    }

    pub fn n_query(&self) -> usize {
        self.q
    }

    pub fn n_gallery(&self) -> usize {
        self.g
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values[q * self.g + g]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.g..(q + 1) * self.g]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn same_layout(&self, other: &DistanceMatrix) -> bool {
        self.q == other.q && self.g == other.g && self.query_meta == other.query_meta && self.gallery_meta == other.gallery_meta
    }
}

/// Euclidean distances between every query row and every gallery row.
pub fn distance_matrix(
    query: &Tensor,
    gallery: &Tensor,
    query_meta: &[ImageMeta],
    gallery_meta: &[ImageMeta],
) -> Result<DistanceMatrix> {
    check_rank("distance_matrix", query, 2)?;
    check_rank("distance_matrix", gallery, 2)?;
    let d = query.dim(1);
    if gallery.dim(1) != d {
        return Err(Error::shape("distance_matrix", "descriptor dim", d, gallery.dim(1)));
    }
    let (q, g) = (query.dim(0), gallery.dim(0));
    let mut values = Vec::with_capacity(q * g);
    for i in 0..q {
        let a = query.row(i);
        for j in 0..g {
            let sq: f64 = a.iter().zip(gallery.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            values.push(sq.sqrt());
        }
    }
    DistanceMatrix::from_values(q, g, values, query_meta.to_vec(), gallery_meta.to_vec(), d)
}

/// Sorts `keys` ascending, ties broken by index.
pub(crate) fn argsort(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    idx
}

/// Gallery indices in ascending distance from query `q`, ties by index.
pub fn rank_list(dm: &DistanceMatrix, q: usize) -> Vec<usize> {
    argsort(dm.row(q))
}

fn is_valid(q: &ImageMeta, g: &ImageMeta) -> bool {
    !(q.identity == g.identity && q.camera == g.camera)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScores {
    /// Rank-k accuracy for k = 1..=k_max.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries that had at least one valid correct match.
    pub n_scored: usize,
    /// Queries without any valid correct match; left out of `cmc` and `map`.
    pub n_excluded: usize,
}

/// CMC and mAP of full gallery orderings, one per query.
pub fn score_rankings(
    rankings: &[Vec<usize>],
    query_meta: &[ImageMeta],
    gallery_meta: &[ImageMeta],
    k_max: usize,
) -> Result<RetrievalScores> {
    if rankings.len() != query_meta.len() {
        return Err(Error::shape("score_rankings", "queries", query_meta.len(), rankings.len()));
    }
    if k_max == 0 {
        return Err(Error::InvalidInput("k_max must be at least 1".into()));
    }
    let mut hits_at = vec![0usize; k_max];
    let mut ap_sum = 0.0;
    let mut n_scored = 0;
    for (ranking, qm) in rankings.iter().zip(query_meta) {
        if ranking.len() != gallery_meta.len() {
            return Err(Error::shape("score_rankings", "ranking length", gallery_meta.len(), ranking.len()));
        }
        let mut first: Option<usize> = None;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut pos = 0usize;
        for &gi in ranking {
            let gm = &gallery_meta[gi];
            if !is_valid(qm, gm) {
                continue;
            }
            if gm.identity == qm.identity {
                hits += 1;
                first.get_or_insert(pos);
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
            pos += 1;
        }
        let Some(first) = first else { continue };
        n_scored += 1;
        ap_sum += precision_sum / hits as f64;
        for h in hits_at.iter_mut().skip(first) {
            *h += 1;
        }
    }
    let n_excluded = rankings.len() - n_scored;
    if n_scored == 0 {
        return Err(Error::InvalidInput(format!(
            "none of the {} queries has a valid correct match in the gallery",
            rankings.len()
        )));
    }
    Ok(RetrievalScores {
        cmc: hits_at.iter().map(|&h| h as f64 / n_scored as f64).collect(),
        map: ap_sum / n_scored as f64,
        n_scored,
        n_excluded,
    })
}

pub fn default_k_max(n_gallery: usize) -> usize {
    DEFAULT_K_MAX.min(n_gallery).max(1)
}

pub fn cmc_map(dm: &DistanceMatrix, k_max: usize) -> Result<RetrievalScores> {
    let rankings: Vec<Vec<usize>> = (0..dm.n_query()).map(|q| rank_list(dm, q)).collect();
    score_rankings(&rankings, &dm.query_meta, &dm.gallery_meta, k_max)
}

/// Which descriptor is used for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// All transformed groups concatenated (plus stripe features, if any).
    Standard,
    /// One group alone (zero-based).
    Fast(usize),
    /// The first `k` groups concatenated.
    Concat(usize),
    /// Per-group rankings aggregated into one.
    Voting(VoteRule),
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Standard => write!(f, "standard"),
            Setting::Fast(i) => write!(f, "fast:{i}"),
            Setting::Concat(k) => write!(f, "concat:{k}"),
            Setting::Voting(VoteRule::Borda) => write!(f, "voting"),
            Setting::Voting(VoteRule::Plurality) => write!(f, "voting:plurality"),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown setting {s:?}; use standard, fast:i, concat:k or voting"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| a.and_then(|a| a.parse::<usize>().ok()).ok_or_else(bad);
        match name {
            "standard" if arg.is_none() => Ok(Setting::Standard),
            "fast" => Ok(Setting::Fast(num(arg)?)),
            "concat" => Ok(Setting::Concat(num(arg)?)),
            "voting" => match arg {
                None | Some("borda") => Ok(Setting::Voting(VoteRule::Borda)),
                Some("plurality") => Ok(Setting::Voting(VoteRule::Plurality)),
                Some(_) => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl Serialize for Setting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Setting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The single descriptor matrix a non-voting setting retrieves with.
pub fn select_descriptor(set: &DescriptorSet, setting: Setting) -> Result<Tensor> {
    let n = set.groups.len();
    match setting {
        Setting::Standard => Ok(set.standard()),
        Setting::Fast(i) if i < n => Ok(set.groups[i].clone()),
        Setting::Fast(i) => Err(Error::InvalidInput(format!("group {i} out of range for {n} groups"))),
        Setting::Concat(k) if (1..=n).contains(&k) => {
            let parts: Vec<&Tensor> = set.groups[..k].iter().collect();
            Tensor::concat_columns(&parts)
        }
        Setting::Concat(k) => Err(Error::InvalidInput(format!("cannot concatenate {k} of {n} groups"))),
        Setting::Voting(_) => Err(Error::InvalidInput("voting has no single descriptor".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub setting: Setting,
    pub descriptor_dim: usize,
    pub distance_ops_per_pair: usize,
    pub rank1: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub n_query: usize,
    pub n_gallery: usize,
    pub n_excluded_queries: usize,
}

impl EvalReport {
    fn new(setting: Setting, dim: usize, ops: usize, scores: RetrievalScores, n_query: usize, n_gallery: usize) -> Self {
        Self {
            schema_version: EVAL_SCHEMA_VERSION,
            setting,
            descriptor_dim: dim,
            distance_ops_per_pair: ops,
            rank1: scores.cmc[0],
            map: scores.map,
            cmc: scores.cmc,
            n_query,
            n_gallery,
            n_excluded_queries: scores.n_excluded,
        }
    }
}

/// Query and gallery descriptors of a dataset's test split.
#[derive(Debug, Clone)]
pub struct TestDescriptors {
    pub query: DescriptorSet,
    pub gallery: DescriptorSet,
    pub query_meta: Vec<ImageMeta>,
    pub gallery_meta: Vec<ImageMeta>,
}

pub fn split_meta(ds: &Dataset, split: Split) -> (Vec<usize>, Vec<ImageMeta>) {
    let idx = ds.indices(split);
    let meta = idx
        .iter()
        .map(|&i| ImageMeta {
            identity: ds.samples[i].identity,
            camera: ds.samples[i].camera,
        })
        .collect();
    (idx, meta)
}

pub fn describe_test_split(model: &Model, ds: &Dataset) -> Result<TestDescriptors> {
    let (qi, query_meta) = split_meta(ds, Split::Query);
    let (gi, gallery_meta) = split_meta(ds, Split::Gallery);
    if qi.is_empty() {
        return Err(Error::InvalidInput("the query set is empty".into()));
    }
    if gi.is_empty() {
        return Err(Error::InvalidInput("the gallery is empty".into()));
    }
    Ok(TestDescriptors {
        query: model.infer(&ds.images(&qi))?,
        gallery: model.infer(&ds.images(&gi))?,
        query_meta,
        gallery_meta,
    })
}

/// Scores one setting on precomputed descriptors.
pub fn evaluate_descriptors(td: &TestDescriptors, setting: Setting, k_max: Option<usize>) -> Result<EvalReport> {
    let (nq, ng) = (td.query_meta.len(), td.gallery_meta.len());
    let k = k_max.unwrap_or_else(|| default_k_max(ng));
    if let Setting::Voting(rule) = setting {
        let voters = |s: &DescriptorSet| -> Vec<Tensor> { s.groups.iter().chain(&s.stripes).cloned().collect() };
        let per_group = voters(&td.query)
            .iter()
            .zip(&voters(&td.gallery))
            .map(|(q, g)| distance_matrix(q, g, &td.query_meta, &td.gallery_meta))
            .collect::<Result<Vec<_>>>()?;
        let fallback = distance_matrix(&td.query.standard(), &td.gallery.standard(), &td.query_meta, &td.gallery_meta)?;
        // a lone voter's ranking is the fallback ranking itself
        let rankings = if per_group.len() < 2 {
            (0..nq).map(|q| rank_list(&fallback, q)).collect()
        } else {
            voting_rank(&per_group, &fallback, rule)?
        };
        let scores = score_rankings(&rankings, &td.query_meta, &td.gallery_meta, k)?;
        let ops = per_group.iter().map(|d| d.ops_per_pair).sum();
        return Ok(EvalReport::new(setting, fallback.ops_per_pair, ops, scores, nq, ng));
    }
    let q = select_descriptor(&td.query, setting)?;
    let g = select_descriptor(&td.gallery, setting)?;
    let dm = distance_matrix(&q, &g, &td.query_meta, &td.gallery_meta)?;
    let scores = cmc_map(&dm, k)?;
    Ok(EvalReport::new(setting, q.dim(1), dm.ops_per_pair, scores, nq, ng))
}

pub fn evaluate(model: &Model, ds: &Dataset, setting: Setting, k_max: Option<usize>) -> Result<EvalReport> {
    evaluate_descriptors(&describe_test_split(model, ds)?, setting, k_max)
}

#[cfg(test)]
mod tests;

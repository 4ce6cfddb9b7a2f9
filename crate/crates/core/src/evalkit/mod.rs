//! Retrieval metrics, generalization gap, sharpness and landscape probes.

mod landscape;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::Objective;
use crate::params::ParameterSet;
use crate::perturb::{self, Perturbation};
use crate::scalar::Scalar;
use crate::synthcir::{Dataset, Triplet};
use crate::tensor::Tensor;

pub use landscape::{
    dataset_loss, flatness_score, landscape_probe, normalized_direction, write_landscape_csv, LandscapeCurve,
};

/// Recall levels reported in `metrics.csv`.
pub const REPORTED_KS: [usize; 4] = [1, 5, 10, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub split: String,
    /// Percentages keyed by K.
    pub recall_at: BTreeMap<usize, f64>,
    /// Mean of `recall_at` over the configured K set.
    pub rmean: f64,
    pub recall_subset_at: BTreeMap<usize, f64>,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    pub fn recall_subset(&self, k: usize) -> Option<f64> {
        self.recall_subset_at.get(&k).copied()
    }
}

fn check_dims<T: Scalar>(queries: &Tensor<T>, gallery: &Tensor<T>) -> Result<()> {
    if queries.cols() != gallery.cols() {
        return Err(Error::shape(
            "rank_gallery",
            format!("query width {} vs gallery width {}", queries.cols(), gallery.cols()),
        ));
    }
    Ok(())
}

/// True when `(score_a, a)` ranks ahead of `(score_b, b)`: higher score, then lower index.
#[inline]
fn ahead<T: Scalar>(score_a: T, a: usize, score_b: T, b: usize) -> bool {
    score_a > score_b || (score_a == score_b && a < b)
}

/// Per query, gallery indices by descending dot product; ties go to the lower index.
pub fn rank_gallery<T: Scalar>(queries: &Tensor<T>, gallery: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
    check_dims(queries, gallery)?;
    Ok((0..queries.rows())
        .map(|q| {
            let scores = scores_for(queries.row(q), gallery);
            let mut order: Vec<usize> = (0..gallery.rows()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));
            order
        })
        .collect())
}

fn scores_for<T: Scalar>(query: &[T], gallery: &Tensor<T>) -> Vec<T> {
    (0..gallery.rows())
        .map(|j| crate::scalar::dot(query, gallery.row(j)))
        .collect()
}

/// 1-based rank of each query's target in the full gallery and within its
/// candidate subset, computed without a full sort.
pub fn target_ranks<T: Scalar>(
    queries: &Tensor<T>,
    gallery: &Tensor<T>,
    targets: &[usize],
    subsets: Option<&[&[usize]]>,
    threads: usize,
) -> Result<Vec<(usize, Option<usize>)>> {
    check_dims(queries, gallery)?;
    if targets.len() != queries.rows() {
        return Err(Error::shape("target_ranks", "one target per query is required"));
    }
    let one = |q: usize| -> (usize, Option<usize>) {
        let t = targets[q];
        let scores = scores_for(queries.row(q), gallery);
        let st = scores[t];
        let global = 1 + (0..scores.len()).filter(|&j| ahead(scores[j], j, st, t)).count();
        let sub = subsets.map(|s| 1 + s[q].iter().filter(|&&j| ahead(scores[j], j, st, t)).count());
        (global, sub)
    };
    let n = queries.rows();
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return Ok((0..n).map(one).collect());
    }
    let chunk = n.div_ceil(threads);
    let mut out = Vec::with_capacity(n);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let one = &one;
                s.spawn(move || (start..(start + chunk).min(n)).map(one).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            out.extend(h.join().expect("ranking thread panicked"));
        }
    });
    Ok(out)
}

/// Percentage of queries whose target is among the first `k` ranked items.
pub fn recall_at_k(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if let Some(r) = rankings.first() {
        if k > r.len() {
            return Err(Error::config(format!("K={k} exceeds gallery size {}", r.len())));
        }
    }
    if rankings.len() != targets.len() || rankings.is_empty() {
        return Err(Error::shape("recall_at_k", "need one nonempty ranking per target"));
    }
    let hits = rankings
        .iter()
        .zip(targets)
        .filter(|(r, t)| r[..k].contains(t))
        .count();
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Recall from precomputed 1-based ranks.
pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Recall after restricting each ranking to the query's candidate subset.
pub fn recall_subset_at_k(
    rankings: &[Vec<usize>],
    subsets: &[&[usize]],
    targets: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if rankings.len() != targets.len() || subsets.len() != targets.len() || targets.is_empty() {
        return Err(Error::shape("recall_subset_at_k", "need one ranking and subset per target"));
    }
    let mut hits = 0;
    for ((ranking, subset), &t) in rankings.iter().zip(subsets).zip(targets) {
        if !subset.contains(&t) {
            return Err(Error::Data(format!("target {t} is missing from its candidate subset")));
        }
        let pos = ranking
            .iter()
            .filter(|i| subset.contains(i))
            .position(|&i| i == t)
            .expect("target is in the subset");
        if pos < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / targets.len() as f64)
}

/// Mean of R@5 and Recall_subset@1.
pub fn cirr_avg(report: &MetricReport) -> Result<f64> {
    match (report.recall(5), report.recall_subset(1)) {
        (Some(r5), Some(rs1)) => Ok((r5 + rs1) / 2.0),
        _ => Err(Error::Data("cirr_avg needs R@5 and Rsubset@1".into())),
    }
}

/// Train Rmean minus validation Rmean.
pub fn generalization_gap(train: &MetricReport, val: &MetricReport) -> Result<f64> {
    let tk: Vec<_> = train.recall_at.keys().collect();
    let vk: Vec<_> = val.recall_at.keys().collect();
    if tk != vk {
        return Err(Error::Data("reports use different K sets".into()));
    }
    Ok(train.rmean - val.rmean)
}

/// `L(theta + delta) - L(theta)` on one batch; two forward passes.
pub fn sharpness<T: Scalar, O: Objective<T>>(
    objective: &O,
    params: &ParameterSet<T>,
    delta: &Perturbation<T>,
    batch: &O::Batch,
) -> Result<T> {
    let base = objective.loss(params, batch)?;
    let perturbed = perturb::apply(params, delta)?;
    Ok(objective.loss(&perturbed, batch)? - base)
}

/// Which recall levels to compute.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallSpec {
    /// K values averaged into Rmean.
    pub rmean_ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
}

impl Default for RecallSpec {
    fn default() -> Self {
        RecallSpec {
            rmean_ks: vec![10, 50],
            subset_ks: vec![1],
        }
    }
}

/// Embeds the gallery and the given queries and reports recall.
pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ParameterSet<T>,
    dataset: &Dataset,
    queries: &[&Triplet],
    split: &str,
    spec: &RecallSpec,
    threads: usize,
) -> Result<MetricReport> {
    if queries.is_empty() {
        return Err(Error::Data(format!("no queries for split `{split}`")));
    }
    let gallery: Tensor<T> = dataset.gallery.cast();
    let gallery_emb = model.forward_target(params, &gallery)?;
    let (refs, mods, _) = dataset.batch_tensors::<T>(queries);
    let query_emb = model.forward_query(params, &refs, &mods)?;
    let targets: Vec<usize> = queries.iter().map(|t| t.target_index).collect();
    let subsets: Vec<&[usize]> = queries.iter().map(|t| t.subset.as_slice()).collect();
    let ranks = target_ranks(&query_emb, &gallery_emb, &targets, Some(&subsets), threads)?;
    let global: Vec<usize> = ranks.iter().map(|r| r.0).collect();
    let sub: Vec<usize> = ranks.iter().map(|r| r.1.expect("subsets given")).collect();

    let g = dataset.gallery.rows();
    let mut recall_at = BTreeMap::new();
    for &k in REPORTED_KS.iter().chain(&spec.rmean_ks) {
        if k <= g {
            recall_at.insert(k, recall_from_ranks(&global, k));
        }
    }
    let mut rmean = 0.0;
    for &k in &spec.rmean_ks {
        rmean += *recall_at
            .get(&k)
            .ok_or_else(|| Error::config(format!("K={k} exceeds gallery size {g}")))?;
    }
    rmean /= spec.rmean_ks.len().max(1) as f64;
    let recall_subset_at = spec
        .subset_ks
        .iter()
        .map(|&k| (k, recall_from_ranks(&sub, k)))
        .collect();
    Ok(MetricReport {
        split: split.to_string(),
        recall_at,
        rmean,
        recall_subset_at,
    })
}

#[cfg(test)]
mod tests;

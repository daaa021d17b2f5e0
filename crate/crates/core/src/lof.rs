//! Exact Local Outlier Factor over sentence features.
//!
//! An index is built once from in-domain training features; held-out
//! sentences are scored against it without ever being inserted (novelty
//! semantics). Everything is exact: full pairwise Euclidean distances, the
//! canonical tie rule (every point within the k-distance is a neighbor),
//! and the textbook three-step definition — k-distance, reachability
//! density, then the mean density ratio.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Immutable store of reference vectors with per-point LOF quantities
/// precomputed. Stored points' own statistics exclude the point itself
/// from its neighbor set; query points see the whole store.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vec<f64>>,
    dim: usize,
    k: usize,
    /// k-distance of each stored point (self excluded).
    kdist: Vec<f64>,
    /// Local reachability density of each stored point; +∞ when all its
    /// neighbors coincide with it.
    lrd: Vec<f64>,
    /// LOF score of each stored point — the reference distribution that
    /// contamination thresholds quantile over.
    train_scores: Vec<f64>,
}

/// Neighbors of one query: every stored point within the k-distance.
struct NeighborSet {
    kdist: f64,
    /// (stored index, distance), in stored order.
    members: Vec<(usize, f64)>,
}

impl NeighborIndex {
    pub fn build(points: Vec<Vec<f64>>, k: usize) -> Result<NeighborIndex> {
        if k == 0 {
            return Err(Error::Config("neighbor count k must be at least 1".into()));
        }
        if points.len() <= k {
            return Err(Error::Data(format!(
                "need more than k={k} stored points, got {}",
                points.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::Data("feature vectors must be non-empty".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Dimension(format!(
                    "point {i} has {} components, expected {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("point {i} has a non-finite component")));
            }
        }

        let mut index = NeighborIndex {
            points,
            dim,
            k,
            kdist: Vec::new(),
            lrd: Vec::new(),
            train_scores: Vec::new(),
        };

        // Pass 1: each stored point's neighbor set, self excluded.
        let neighbor_sets: Vec<NeighborSet> = {
            let compute = |i: usize| index.neighbors(&index.points[i], Some(i));
            #[cfg(feature = "parallel")]
            {
                (0..index.points.len()).into_par_iter().map(compute).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..index.points.len()).map(compute).collect()
            }
        };
        index.kdist = neighbor_sets.iter().map(|n| n.kdist).collect();

        // Pass 2: densities need every neighbor's k-distance, so they only
        // exist once pass 1 is complete.
        index.lrd = neighbor_sets
            .iter()
            .map(|n| index.lrd_from_neighbors(n))
            .collect();

        // Pass 3: each stored point's own outlier factor.
        index.train_scores = neighbor_sets
            .iter()
            .zip(&index.lrd)
            .map(|(n, &own)| index.score_from_neighbors(n, own))
            .collect();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// LOF of every stored point against the rest of the store.
    pub fn train_scores(&self) -> &[f64] {
        &self.train_scores
    }

    /// Distance from a query to its k-th nearest stored point (ties at the
    /// boundary widen the neighbor set, not this distance).
    pub fn k_distance(&self, point: &[f64]) -> f64 {
        self.neighbors(point, None).kdist
    }

    /// max(k-distance of stored point `b`, d(point, b)).
    pub fn reach_dist(&self, point: &[f64], b: usize) -> f64 {
        self.check_dim(point);
        self.kdist[b].max(distance(point, &self.points[b]))
    }

    /// Local reachability density of a query: neighbor count over summed
    /// reachability distances; +∞ if every neighbor coincides with it.
    pub fn lrd(&self, point: &[f64]) -> f64 {
        let n = self.neighbors(point, None);
        self.lrd_from_neighbors(&n)
    }

    /// LOF of a query: mean over neighbors of lrd(neighbor)/lrd(query).
    /// Greater than 1 means locally sparser than its neighborhood — more
    /// outlying. Can be +∞ when the query sits in open space next to a
    /// cluster of exact duplicates.
    pub fn lof(&self, point: &[f64]) -> f64 {
        let n = self.neighbors(point, None);
        let own = self.lrd_from_neighbors(&n);
        self.score_from_neighbors(&n, own)
    }

    /// [`lof`](Self::lof) over many queries, in parallel when enabled.
    /// Queries are independent, so output order and values match the
    /// serial path exactly.
    pub fn lof_batch(&self, points: &[Vec<f64>]) -> Vec<f64> {
        let score = |p: &Vec<f64>| self.lof(p);
        #[cfg(feature = "parallel")]
        let out = points.par_iter().map(score).collect();
        #[cfg(not(feature = "parallel"))]
        let out = points.iter().map(score).collect();
        out
    }

    fn check_dim(&self, point: &[f64]) {
        assert_eq!(
            point.len(),
            self.dim,
            "query has {} components, index stores {}",
            point.len(),
            self.dim
        );
    }

    /// All stored points within the query's k-distance, excluding
    /// `exclude` (the point's own index during build).
    fn neighbors(&self, point: &[f64], exclude: Option<usize>) -> NeighborSet {
        self.check_dim(point);
        let mut dists: Vec<(usize, f64)> = self
            .points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, p)| (i, distance(point, p)))
            .collect();
        // Stable selection of the k nearest; ties beyond rank k join below.
        dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let kdist = dists[self.k - 1].1;
        let members = dists.into_iter().take_while(|(_, d)| *d <= kdist).collect();
        NeighborSet { kdist, members }
    }

    fn lrd_from_neighbors(&self, n: &NeighborSet) -> f64 {
        let sum: f64 = n
            .members
            .iter()
            .map(|&(b, d)| self.kdist[b].max(d))
            .sum();
        if sum == 0.0 {
            f64::INFINITY
        } else {
            n.members.len() as f64 / sum
        }
    }

    fn score_from_neighbors(&self, n: &NeighborSet, own_lrd: f64) -> f64 {
        let sum: f64 = n
            .members
            .iter()
            .map(|&(b, _)| density_ratio(self.lrd[b], own_lrd))
            .sum();
        sum / n.members.len() as f64
    }
}

/// lrd(neighbor)/lrd(self) with the degenerate cases pinned down: two
/// infinite densities cancel (a duplicate among duplicates is perfectly
/// ordinary), an infinitely dense neighborhood around a finite-density
/// point is maximally outlying, and the reverse is maximally inlying.
fn density_ratio(neighbor: f64, own: f64) -> f64 {
    match (neighbor.is_infinite(), own.is_infinite()) {
        (true, true) => 1.0,
        (true, false) => f64::INFINITY,
        (false, true) => 0.0,
        (false, false) => neighbor / own,
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// The score threshold implied by a contamination rate: the value at the
/// (1 − rate) quantile of the stored points' own LOF scores (nearest rank).
/// Flagging scores at or above it marks roughly that fraction of the
/// training set as outliers.
pub fn contamination_threshold(train_scores: &[f64], contamination: f64) -> f64 {
    assert!(
        (0.0..1.0).contains(&contamination) && contamination > 0.0,
        "contamination must lie in (0, 1), got {contamination}"
    );
    assert!(!train_scores.is_empty(), "no training scores to take a quantile of");
    let mut sorted = train_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = (((1.0 - contamination) * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// One grid point of the contamination sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContaminationChoice {
    pub contamination: f64,
    pub threshold: f64,
    pub valid_macro_f1: f64,
}

/// Sweep contamination over {0.01, 0.02, …, 0.50}; every rate maps to a
/// threshold over the training scores, which classifies the validation
/// scores. Returns the rate with the best binary macro-F1 there (earliest
/// on exact ties).
pub fn tune_contamination(
    train_scores: &[f64],
    valid_scores: &[f64],
    valid_is_ood: &[bool],
) -> Result<ContaminationChoice> {
    if valid_scores.len() != valid_is_ood.len() {
        return Err(Error::Data(format!(
            "{} validation scores but {} flags",
            valid_scores.len(),
            valid_is_ood.len()
        )));
    }
    let n_ood = valid_is_ood.iter().filter(|o| **o).count();
    if n_ood == 0 || n_ood == valid_is_ood.len() {
        return Err(Error::Data(
            "contamination tuning needs both in-domain and out-of-domain validation points".into(),
        ));
    }

    let mut best: Option<ContaminationChoice> = None;
    for step in 1..=50 {
        let contamination = step as f64 / 100.0;
        let threshold = contamination_threshold(train_scores, contamination);
        let f1 = binary_macro_f1(valid_scores, valid_is_ood, threshold);
        if best.is_none_or(|b| f1 > b.valid_macro_f1) {
            best = Some(ContaminationChoice {
                contamination,
                threshold,
                valid_macro_f1: f1,
            });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Macro-F1 of "score ≥ threshold ⇒ outlier" over the two classes.
/// Thresholds may classify everything one way; an absent class's F1 is 0.
fn binary_macro_f1(scores: &[f64], is_ood: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (s, o) in scores.iter().zip(is_ood) {
        match (*s >= threshold, *o) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    };
    (f1(tp, fp, fn_) + f1(tn, fn_, fp)) / 2.0
}

//! Detection metrics over scored test sets.
//!
//! Scores follow the OOD-positive convention: η is an outlier score, higher
//! means more likely out-of-domain. Threshold-independent metrics are AUROC
//! (Mann-Whitney with half credit for ties) and AUPR (non-interpolated
//! average precision, OOD as the positive class and secondarily ID).
//! Threshold-dependent metrics are FPR at a target TPR and binary macro-F1
//! at a threshold tuned on validation data.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// η values with binary OOD labels.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    etas: Vec<f64>,
    ood: Vec<bool>,
    n_ood: usize,
    n_id: usize,
}

impl ScoredSet {
    pub fn new(etas: Vec<f64>, ood: Vec<bool>) -> Result<ScoredSet> {
        if etas.len() != ood.len() {
            return Err(Error::Dimension(format!(
                "{} scores but {} labels",
                etas.len(),
                ood.len()
            )));
        }
        if let Some(e) = etas.iter().find(|e| !e.is_finite()) {
            return Err(Error::NonFinite(format!("score {e} is not finite")));
        }
        let n_ood = ood.iter().filter(|&&o| o).count();
        let n_id = ood.len() - n_ood;
        Ok(ScoredSet {
            etas,
            ood,
            n_ood,
            n_id,
        })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, bool)>) -> Result<ScoredSet> {
        let (etas, ood) = pairs.into_iter().unzip();
        ScoredSet::new(etas, ood)
    }

    pub fn len(&self) -> usize {
        self.etas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.etas.is_empty()
    }

    pub fn n_ood(&self) -> usize {
        self.n_ood
    }

    pub fn n_id(&self) -> usize {
        self.n_id
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.n_ood == 0 || self.n_id == 0 {
            return Err(Error::Data(format!(
                "metric needs both classes, got {} OOD and {} ID",
                self.n_ood, self.n_id
            )));
        }
        Ok(())
    }

    /// Distinct η values, ascending.
    fn distinct_ascending(&self) -> Vec<f64> {
        let mut v = self.etas.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v
    }
}

/// Probability that a random OOD score exceeds a random ID score, ties at
/// half credit. Computed from tied ranks in integer arithmetic, so the only
/// rounding is one final division.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    set.require_both_classes()?;
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| set.etas[a].partial_cmp(&set.etas[b]).unwrap());

    // Twice the sum of OOD average ranks. For a tie block occupying
    // one-based ranks a..=b, twice the average rank is a + b exactly.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && set.etas[idx[end + 1]] == set.etas[idx[start]] {
            end += 1;
        }
        let twice_avg = (start + 1 + end + 1) as u128;
        for &i in &idx[start..=end] {
            if set.ood[i] {
                twice_rank_sum += twice_avg;
            }
        }
        start = end + 1;
    }
    let n_ood = set.n_ood as u128;
    let n_id = set.n_id as u128;
    // 2U = 2R − n_ood(n_ood + 1); AUROC = U / (n_ood · n_id).
    let twice_u = twice_rank_sum - n_ood * (n_ood + 1);
    Ok(twice_u as f64 / (2 * n_ood * n_id) as f64)
}

/// Average precision with `positive` selecting which class counts as a hit
/// and `score` giving the descending ranking key for each item.
fn average_precision(items: &[(f64, bool)]) -> f64 {
    let n_pos = items.iter().filter(|(_, p)| *p).count();
    let mut sorted: Vec<&(f64, bool)> = items.iter().collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut recall_prev = 0.0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start;
        while end + 1 < sorted.len() && sorted[end + 1].0 == sorted[start].0 {
            end += 1;
        }
        for item in &sorted[start..=end] {
            seen += 1;
            if item.1 {
                tp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        start = end + 1;
    }
    ap
}

/// Area under the precision-recall curve with OOD as the positive class.
pub fn aupr_ood(set: &ScoredSet) -> Result<f64> {
    set.require_both_classes()?;
    let items: Vec<(f64, bool)> = set.etas.iter().copied().zip(set.ood.iter().copied()).collect();
    Ok(average_precision(&items))
}

/// Area under the precision-recall curve with ID as the positive class
/// (ranking by −η, since low η means in-domain).
pub fn aupr_id(set: &ScoredSet) -> Result<f64> {
    set.require_both_classes()?;
    let items: Vec<(f64, bool)> = set
        .etas
        .iter()
        .map(|e| -e)
        .zip(set.ood.iter().map(|o| !o))
        .collect();
    Ok(average_precision(&items))
}

/// False positive rate at the largest threshold that still recalls at least
/// `k` of the OOD class. Predictions are η ≥ t ⇒ OOD; the denominator is
/// the ID count.
pub fn fpr_at_tpr(set: &ScoredSet, k: f64) -> Result<f64> {
    set.require_both_classes()?;
    if !(0.0 < k && k <= 1.0) {
        return Err(Error::Config(format!("target TPR must be in (0, 1], got {k}")));
    }
    let mut best: Option<f64> = None;
    for &t in set.distinct_ascending().iter().rev() {
        let tpr = set
            .etas
            .iter()
            .zip(&set.ood)
            .filter(|(e, o)| **o && **e >= t)
            .count() as f64
            / set.n_ood as f64;
        if tpr >= k {
            best = Some(t);
            break;
        }
    }
    // The minimum η always yields TPR = 1, so a threshold exists.
    let t = best.expect("minimum score reaches full recall");
    let fp = set
        .etas
        .iter()
        .zip(&set.ood)
        .filter(|(e, o)| !**o && **e >= t)
        .count();
    Ok(fp as f64 / set.n_id as f64)
}

/// F1 of both binary classes at one threshold, with their unweighted mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdF1 {
    pub macro_f1: f64,
    pub ood_f1: f64,
    pub id_f1: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    // 2tp / (2tp + fp + fn); an empty class with no predictions scores 0.
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Binary F1 for each class of the decision η ≥ t ⇒ OOD.
pub fn f1_at_threshold(set: &ScoredSet, t: f64) -> ThresholdF1 {
    let mut tp_ood = 0;
    let mut fp_ood = 0;
    let mut fn_ood = 0;
    let mut tp_id = 0;
    for (&e, &o) in set.etas.iter().zip(&set.ood) {
        let pred_ood = e >= t;
        match (o, pred_ood) {
            (true, true) => tp_ood += 1,
            (false, true) => fp_ood += 1,
            (true, false) => fn_ood += 1,
            (false, false) => tp_id += 1,
        }
    }
    // For the ID class the roles swap: missed OOD rows are ID false
    // positives and flagged ID rows are ID false negatives.
    let ood_f1 = f1(tp_ood, fp_ood, fn_ood);
    let id_f1 = f1(tp_id, fn_ood, fp_ood);
    ThresholdF1 {
        macro_f1: 0.5 * (ood_f1 + id_f1),
        ood_f1,
        id_f1,
    }
}

/// Threshold maximizing binary macro-F1 on a validation set. Candidates are
/// midpoints between consecutive distinct η values plus ±∞ sentinels; ties
/// resolve to the smallest candidate.
pub fn tune_threshold(validation: &ScoredSet) -> Result<f64> {
    validation.require_both_classes()?;
    let distinct = validation.distinct_ascending();
    let mut candidates = vec![f64::NEG_INFINITY];
    for pair in distinct.windows(2) {
        candidates.push(0.5 * (pair[0] + pair[1]));
    }
    candidates.push(f64::INFINITY);

    let mut best_t = candidates[0];
    let mut best_f1 = f1_at_threshold(validation, best_t).macro_f1;
    for &t in &candidates[1..] {
        let f = f1_at_threshold(validation, t).macro_f1;
        if f > best_f1 {
            best_f1 = f;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Unweighted mean of per-class F1 over `n_classes` label ids. Classes with
/// no gold members and no predictions score 0 and still enter the mean.
pub fn multiclass_macro_f1(pred: &[usize], gold: &[usize], n_classes: usize) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} predictions but {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if n_classes == 0 || pred.is_empty() {
        return Err(Error::Data("macro-F1 needs at least one class and one row".into()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(gold) {
        if p >= n_classes || g >= n_classes {
            return Err(Error::Data(format!(
                "label id out of range: pred {p}, gold {g}, classes {n_classes}"
            )));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let sum: f64 = (0..n_classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum();
    Ok(sum / n_classes as f64)
}

/// ROC polyline: one `(threshold, tpr, fpr)` row per distinct η, thresholds
/// descending so rates increase along the curve.
pub fn roc_points(set: &ScoredSet) -> Result<Vec<(f64, f64, f64)>> {
    set.require_both_classes()?;
    let mut out = Vec::new();
    for &t in set.distinct_ascending().iter().rev() {
        let mut tp = 0;
        let mut fp = 0;
        for (&e, &o) in set.etas.iter().zip(&set.ood) {
            if e >= t {
                if o {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        out.push((t, tp as f64 / set.n_ood as f64, fp as f64 / set.n_id as f64));
    }
    Ok(out)
}

/// PR polyline: one `(threshold, precision, recall)` row per distinct η,
/// thresholds descending, OOD positive.
pub fn pr_points(set: &ScoredSet) -> Result<Vec<(f64, f64, f64)>> {
    set.require_both_classes()?;
    let mut out = Vec::new();
    for &t in set.distinct_ascending().iter().rev() {
        let mut tp = 0;
        let mut flagged = 0;
        for (&e, &o) in set.etas.iter().zip(&set.ood) {
            if e >= t {
                flagged += 1;
                if o {
                    tp += 1;
                }
            }
        }
        out.push((
            t,
            tp as f64 / flagged as f64,
            tp as f64 / set.n_ood as f64,
        ));
    }
    Ok(out)
}

pub fn points_to_csv(header: &str, points: &[(f64, f64, f64)]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for (a, b, c) in points {
        out.push_str(&format!("{a}\t{b}\t{c}\n").replace('\t', ","));
    }
    out
}

/// All metrics for one method on one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub threshold: f64,
    pub fpr_at_95_tpr: f64,
    pub auroc: f64,
    pub aupr_ood: f64,
    pub aupr_id: f64,
    pub macro_f1: f64,
    pub ood_f1: f64,
    pub id_f1: f64,
}

impl SeedMetrics {
    /// Evaluate one method: tune the threshold on validation, then compute
    /// every metric on test.
    pub fn evaluate(validation: &ScoredSet, test: &ScoredSet) -> Result<SeedMetrics> {
        // The ±∞ sentinels from tuning don't survive a JSON round trip, so
        // record them clamped; stored scores live in the same clamped domain.
        let threshold = tune_threshold(validation)?.clamp(f64::MIN, f64::MAX);
        let f = f1_at_threshold(test, threshold);
        Ok(SeedMetrics {
            threshold,
            fpr_at_95_tpr: fpr_at_tpr(test, 0.95)?,
            auroc: auroc(test)?,
            aupr_ood: aupr_ood(test)?,
            aupr_id: aupr_id(test)?,
            macro_f1: f.macro_f1,
            ood_f1: f.ood_f1,
            id_f1: f.id_f1,
        })
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> MetricSummary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MetricSummary { mean, std }
    }

    /// Render as a percentage, e.g. `97.42 ± 0.26`.
    pub fn as_percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Seed-aggregated metrics for one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub fpr_at_95_tpr: MetricSummary,
    pub auroc: MetricSummary,
    pub aupr_ood: MetricSummary,
    pub aupr_id: MetricSummary,
    pub macro_f1: MetricSummary,
    pub ood_f1: MetricSummary,
    pub id_f1: MetricSummary,
}

/// Aggregate one method's per-seed metrics into mean ± sample stddev.
pub fn aggregate_seeds(per_seed: &[SeedMetrics]) -> Result<AggregateMetrics> {
    if per_seed.is_empty() {
        return Err(Error::Data("aggregation needs at least one seed".into()));
    }
    let collect = |f: fn(&SeedMetrics) -> f64| {
        MetricSummary::from_values(&per_seed.iter().map(f).collect::<Vec<_>>())
    };
    Ok(AggregateMetrics {
        fpr_at_95_tpr: collect(|m| m.fpr_at_95_tpr),
        auroc: collect(|m| m.auroc),
        aupr_ood: collect(|m| m.aupr_ood),
        aupr_id: collect(|m| m.aupr_id),
        macro_f1: collect(|m| m.macro_f1),
        ood_f1: collect(|m| m.ood_f1),
        id_f1: collect(|m| m.id_f1),
    })
}

/// Per-method results for one seed set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub per_seed: BTreeMap<u64, SeedMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Full evaluation: every method, every seed, plus aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub methods: BTreeMap<String, MethodReport>,
}

impl EvalReport {
    /// Assemble and aggregate, refusing methods whose seed set differs from
    /// the declared one.
    pub fn assemble(
        seeds: &[u64],
        per_method: BTreeMap<String, BTreeMap<u64, SeedMetrics>>,
    ) -> Result<EvalReport> {
        let mut declared: Vec<u64> = seeds.to_vec();
        declared.sort();
        let mut methods = BTreeMap::new();
        for (name, per_seed) in per_method {
            let got: Vec<u64> = per_seed.keys().copied().collect();
            if got != declared {
                return Err(Error::Data(format!(
                    "method {name} has seeds {got:?}, declared {declared:?}"
                )));
            }
            let values: Vec<SeedMetrics> = per_seed.values().copied().collect();
            methods.insert(
                name,
                MethodReport {
                    per_seed,
                    aggregate: aggregate_seeds(&values)?,
                },
            );
        }
        Ok(EvalReport {
            seeds: declared,
            methods,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("report serialization: {e}")))
    }

    pub fn from_json(json: &str) -> Result<EvalReport> {
        serde_json::from_str(json).map_err(|e| Error::Data(format!("report parse: {e}")))
    }

    /// Results table, one method per row, metrics as `mean ± std` percents.
    pub fn to_table_tsv(&self) -> String {
        let mut out = String::from("method\tfpr_at_95_tpr\tauroc\taupr_ood\tmacro_f1\n");
        for (name, m) in &self.methods {
            out.push_str(&format!(
                "{name}\t{}\t{}\t{}\t{}\n",
                m.aggregate.fpr_at_95_tpr.as_percent(),
                m.aggregate.auroc.as_percent(),
                m.aggregate.aupr_ood.as_percent(),
                m.aggregate.macro_f1.as_percent(),
            ));
        }
        out
    }
}

//! Release gates for the toolkit, one test per gate. Every gate prints a
//! single `PASS`/`FAIL`/`WAIVED` line (shown with `--nocapture`) and then
//! asserts, so the suite doubles as a checklist:
//!
//! 1. ranking metrics against independent oracles;
//! 2. outlier factors against a direct transcription of the definition;
//! 3. gradient checks on all four trainable architectures;
//! 4. the entropy / uniform-KL constant-shift identity;
//! 5. goodness-of-fit of the three noise distributions;
//! 6. end-to-end separation on the synthetic benchmark;
//! 7. reproduction on the external corpus when its files are present;
//! 8. coverage and minimality of the class-holdout generator.
//!
//! Tolerances and time budgets are pinned here, in code, on purpose.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use intent_ood::corpus::{
    make_holdout_split, DatasetBundle, Utterance, Vocabulary, BOS_ID, EOS_ID, RESERVED,
};
use intent_ood::experiment::{
    run_experiment, DataSource, ExperimentConfig, LabelMode, ModelConfig,
};
use intent_ood::lof::NeighborIndex;
use intent_ood::metrics::{auroc, aupr_id, aupr_ood, ScoredSet};
use intent_ood::models::{
    DiscConfig, DiscriminativeClassifier, EncodedRow, GenConfig, GenerativeClassifier, HeadMode,
    LanguageModel, LmConfig,
};
use intent_ood::neural::{gradient_check, ParameterStore};
use intent_ood::noising::{NoiseDistribution, NoiseKind};
use intent_ood::scoring::{score_entropy, score_neg_kl};
use intent_ood::synth::SynthConfig;

/// Print the gate's one-line verdict, then enforce it.
fn gate(name: &str, pass: bool, detail: &str) {
    println!("acceptance {name}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "acceptance {name} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Gate 1: AUROC and average precision against independent oracles.
// ---------------------------------------------------------------------------

/// ROC area by explicit trapezoidal integration over the tie-collapsed
/// curve, sharing no code with the rank-based implementation.
fn auroc_by_trapezoid(etas: &[f64], ood: &[bool]) -> f64 {
    let n_ood = ood.iter().filter(|o| **o).count();
    let n_id = ood.len() - n_ood;
    let mut order: Vec<usize> = (0..etas.len()).collect();
    order.sort_by(|&a, &b| etas[b].total_cmp(&etas[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_fpr, mut prev_tpr) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && etas[order[j]] == etas[order[i]] {
            if ood[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let fpr = fp as f64 / n_id as f64;
        let tpr = tp as f64 / n_ood as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_fpr = fpr;
        prev_tpr = tpr;
        i = j;
    }
    area
}

/// Average precision by recounting true and false positives from scratch
/// at every distinct threshold — O(n · distinct), no shared state.
fn average_precision_by_recount(etas: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|p| **p).count();
    let mut thresholds: Vec<f64> = etas.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&e, &p) in etas.iter().zip(positive) {
            if e >= t {
                if p {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// A random score set of the given size with both classes present and a
/// controllable amount of exact ties.
fn random_scored_pairs(rng: &mut ChaCha12Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    let n_ood = rng.gen_range(1..n);
    let mut ood: Vec<bool> = (0..n).map(|i| i < n_ood).collect();
    for i in (1..n).rev() {
        ood.swap(i, rng.gen_range(0..=i));
    }
    let etas: Vec<f64> = match rng.gen_range(0..4) {
        // Heavy ties: a handful of integer levels.
        0 => (0..n).map(|_| rng.gen_range(0..5) as f64).collect(),
        // Moderate ties: one decimal place.
        1 => (0..n).map(|_| (rng.gen_range(-50..50) as f64) / 10.0).collect(),
        // Continuous with occasional exact copies of earlier scores.
        2 => {
            let mut etas: Vec<f64> = Vec::with_capacity(n);
            for i in 0..n {
                if i > 0 && rng.gen_bool(0.3) {
                    etas.push(etas[rng.gen_range(0..i)]);
                } else {
                    etas.push(rng.gen_range(-5.0..5.0));
                }
            }
            etas
        }
        // Fully degenerate: every score identical.
        _ => vec![rng.gen_range(-5.0..5.0); n],
    };
    (etas, ood)
}

#[test]
fn gate_1_ranking_metrics_match_independent_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let tolerance = 1e-12;
    let mut worst: f64 = 0.0;

    for round in 0..1000 {
        let n = rng.gen_range(2..=500);
        let (etas, ood) = random_scored_pairs(&mut rng, n);
        let set = ScoredSet::new(etas.clone(), ood.clone()).unwrap();

        let roc_gap = (auroc(&set).unwrap() - auroc_by_trapezoid(&etas, &ood)).abs();
        let ood_gap =
            (aupr_ood(&set).unwrap() - average_precision_by_recount(&etas, &ood)).abs();
        let neg: Vec<f64> = etas.iter().map(|e| -e).collect();
        let id_flags: Vec<bool> = ood.iter().map(|o| !o).collect();
        let id_gap =
            (aupr_id(&set).unwrap() - average_precision_by_recount(&neg, &id_flags)).abs();

        for (metric, gap) in [("auroc", roc_gap), ("aupr_ood", ood_gap), ("aupr_id", id_gap)] {
            worst = worst.max(gap);
            assert!(
                gap <= tolerance,
                "round {round} (n={n}): {metric} differs from its oracle by {gap:e}"
            );
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    gate(
        "1/8 (metric oracles)",
        worst <= tolerance && elapsed < 10.0,
        &format!("1000 score sets, worst |Δ| {worst:.2e} (tolerance 1e-12), {elapsed:.1}s (budget 10s)"),
    );
}

// ---------------------------------------------------------------------------
// Gate 2: outlier factors against a direct O(n²) transcription.
// ---------------------------------------------------------------------------

/// The textbook definition computed the slow way: full distance matrix,
/// k-distance as the k-th order statistic, every point within it a
/// neighbor, reachability sums, then the mean density ratio.
mod direct_lof {
    pub fn distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    /// (k-distance, members) of a query against the stored points,
    /// excluding `skip` when the query is itself stored.
    pub fn neighborhood(
        points: &[Vec<f64>],
        q: &[f64],
        skip: Option<usize>,
        k: usize,
    ) -> (f64, Vec<usize>) {
        let mut dists: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, p)| (i, distance(q, p)))
            .collect();
        dists.sort_by(|a, b| a.1.total_cmp(&b.1));
        let kdist = dists[k - 1].1;
        let members = dists.into_iter().filter(|&(_, d)| d <= kdist).map(|(i, _)| i).collect();
        (kdist, members)
    }

    pub fn reach_density(
        points: &[Vec<f64>],
        kdists: &[f64],
        q: &[f64],
        skip: Option<usize>,
        k: usize,
    ) -> f64 {
        let (_, members) = neighborhood(points, q, skip, k);
        let sum: f64 = members
            .iter()
            .map(|&b| kdists[b].max(distance(q, &points[b])))
            .sum();
        if sum == 0.0 {
            f64::INFINITY
        } else {
            members.len() as f64 / sum
        }
    }

    pub fn outlier_factor(
        points: &[Vec<f64>],
        kdists: &[f64],
        densities: &[f64],
        q: &[f64],
        skip: Option<usize>,
        k: usize,
    ) -> f64 {
        let (_, members) = neighborhood(points, q, skip, k);
        let own = reach_density(points, kdists, q, skip, k);
        let sum: f64 = members
            .iter()
            .map(|&b| match (densities[b].is_infinite(), own.is_infinite()) {
                (true, true) => 1.0,
                (true, false) => f64::INFINITY,
                (false, true) => 0.0,
                (false, false) => densities[b] / own,
            })
            .sum();
        sum / members.len() as f64
    }
}

/// Equal within `tol`, treating equal infinities as equal.
fn close_or_both_infinite(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        a == b
    } else {
        (a - b).abs() <= tol
    }
}

#[test]
fn gate_2_outlier_scores_match_a_direct_transcription() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let tolerance = 1e-9;
    let ks = [2usize, 5, 20];
    let mut checked = 0usize;

    for round in 0..100 {
        let k = ks[round % ks.len()];
        let n = rng.gen_range(k + 1..=200);
        let dim = rng.gen_range(1..=10);

        // Clustered points; a quarter of them exact copies of earlier ones
        // so zero distances and infinite densities get exercised.
        let n_centers = rng.gen_range(1..=3);
        let centers: Vec<Vec<f64>> = (0..n_centers)
            .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 && rng.gen_bool(0.25) {
                points.push(points[rng.gen_range(0..i)].clone());
            } else {
                let c = &centers[rng.gen_range(0..n_centers)];
                points.push(c.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect());
            }
        }

        let index = NeighborIndex::build(points.clone(), k).unwrap();
        let kdists: Vec<f64> = (0..n)
            .map(|i| direct_lof::neighborhood(&points, &points[i], Some(i), k).0)
            .collect();
        let densities: Vec<f64> = (0..n)
            .map(|i| direct_lof::reach_density(&points, &kdists, &points[i], Some(i), k))
            .collect();

        for i in 0..n {
            let want =
                direct_lof::outlier_factor(&points, &kdists, &densities, &points[i], Some(i), k);
            let got = index.train_scores()[i];
            assert!(
                close_or_both_infinite(got, want, tolerance),
                "round {round} (n={n}, dim={dim}, k={k}): stored point {i} scored {got}, direct {want}"
            );
            checked += 1;
        }
        for _ in 0..10 {
            let q: Vec<f64> = if rng.gen_bool(0.2) {
                points[rng.gen_range(0..n)].clone()
            } else {
                (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect()
            };
            let want = direct_lof::outlier_factor(&points, &kdists, &densities, &q, None, k);
            let got = index.lof(&q);
            assert!(
                close_or_both_infinite(got, want, tolerance),
                "round {round} (n={n}, dim={dim}, k={k}): query scored {got}, direct {want}"
            );
            checked += 1;
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    gate(
        "2/8 (outlier factor vs direct computation)",
        elapsed < 30.0,
        &format!("100 point sets, {checked} scores within 1e-9, {elapsed:.1}s (budget 30s)"),
    );
}

// ---------------------------------------------------------------------------
// Gate 3: finite-difference gradient checks on all four architectures.
// ---------------------------------------------------------------------------

/// Scale every parameter away from its small random initialization. The
/// check runs at a generic point in parameter space: near the origin the
/// cosine-margin head divides by tiny feature norms, which blows up the
/// higher-order terms the central difference truncates, drowning the
/// signal the check is after. The tape's gradients are the same code path
/// at either point.
fn inflate_parameters(store: &mut ParameterStore, factor: f64) {
    let mut values = store.clone_values();
    for tensor in &mut values {
        for v in tensor.as_mut_slice() {
            *v *= factor;
        }
    }
    store.restore_values(&values);
}

fn toy_rows(with_labels: bool) -> Vec<EncodedRow> {
    let sentences: [&[usize]; 5] = [
        &[4, 5, 6],
        &[7, 8],
        &[9, 10, 11, 4],
        &[5, 9],
        &[6, 7, 10, 11, 8],
    ];
    sentences
        .iter()
        .enumerate()
        .map(|(i, ids)| {
            let mut framed = Vec::with_capacity(ids.len() + 2);
            framed.push(BOS_ID);
            framed.extend_from_slice(ids);
            framed.push(EOS_ID);
            EncodedRow::new(framed, with_labels.then_some(i % 3))
        })
        .collect()
}

#[test]
fn gate_3_every_architecture_passes_gradient_checks() {
    let start = Instant::now();
    let threshold = 1e-4;
    let step = 1e-5;
    let mut results: Vec<(&str, f64)> = Vec::new();

    // Unconditional language model.
    {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let config = LmConfig { vocab_size: 12, embed_dim: 4, hidden: 4 };
        let model = LanguageModel::new(&mut store, &config, &mut rng);
        inflate_parameters(&mut store, 5.0);
        let rows = toy_rows(false);
        let worst = gradient_check(&mut store, step, |g| model.training_loss(g, &rows));
        results.push(("language model", worst));
    }

    // Generative classifier.
    {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let config = GenConfig {
            vocab_size: 12,
            n_labels: 3,
            embed_dim: 4,
            label_dim: 3,
            hidden: 4,
        };
        let priors = vec![0.5, 0.3, 0.2];
        let model = GenerativeClassifier::new(&mut store, &config, &priors, &mut rng).unwrap();
        inflate_parameters(&mut store, 5.0);
        let rows = toy_rows(true);
        let worst =
            gradient_check(&mut store, step, |g| model.training_loss(g, &rows).unwrap());
        results.push(("generative classifier", worst));
    }

    // Discriminative classifier, both heads. The margin head runs at its
    // production margin and scale — the values scoring actually uses.
    for (name, head, seed) in [
        ("softmax classifier", HeadMode::Softmax, 8u64),
        ("margin classifier", HeadMode::Lmcl { margin: 0.35, scale: 30.0 }, 9u64),
    ] {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let config = DiscConfig {
            vocab_size: 12,
            n_labels: 3,
            embed_dim: 4,
            proj_dim: 5,
            hidden: 3,
            head,
        };
        let model = DiscriminativeClassifier::new(&mut store, &config, &mut rng).unwrap();
        inflate_parameters(&mut store, 5.0);
        let rows = toy_rows(true);
        let worst =
            gradient_check(&mut store, step, |g| model.training_loss(g, &rows).unwrap());
        results.push((name, worst));
    }

    let elapsed = start.elapsed().as_secs_f64();
    let overall = results.iter().fold(0.0f64, |acc, (_, w)| acc.max(*w));
    let detail: Vec<String> =
        results.iter().map(|(name, w)| format!("{name} {w:.1e}")).collect();
    gate(
        "3/8 (gradient checks)",
        overall < threshold && elapsed < 60.0,
        &format!(
            "worst relative error per architecture: {} (threshold 1e-4), {elapsed:.1}s (budget 60s)",
            detail.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// Gate 4: −KL(P‖U) is exactly entropy minus ln K, so the two scorers rank
// identically.
// ---------------------------------------------------------------------------

fn random_posterior(rng: &mut ChaCha12Rng, k: usize) -> Vec<f64> {
    // Unit-rate exponentials normalized to a flat Dirichlet draw.
    let raw: Vec<f64> = (0..k).map(|_| -rng.gen_range(1e-12..1.0f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

#[test]
fn gate_4_uniform_kl_is_a_constant_shift_of_entropy() {
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let tolerance = 1e-9;
    let mut worst: f64 = 0.0;

    for _ in 0..10_000 {
        let k = rng.gen_range(2..=20);
        let p = random_posterior(&mut rng, k);
        let uniform = vec![1.0 / k as f64; k];
        let neg_kl = score_neg_kl(&p, &uniform).unwrap();
        let shifted = score_entropy(&p) - (k as f64).ln();
        worst = worst.max((neg_kl - shifted).abs());
    }

    // Shifting every score of a set by one constant cannot change its
    // ranking, so ROC areas must agree to the last bit.
    let mut auroc_pairs_equal = true;
    for _ in 0..50 {
        let k = rng.gen_range(2..=20);
        let n = 200;
        let flags: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let posteriors: Vec<Vec<f64>> = (0..n).map(|_| random_posterior(&mut rng, k)).collect();
        let uniform = vec![1.0 / k as f64; k];
        let by_entropy: Vec<f64> = posteriors.iter().map(|p| score_entropy(p)).collect();
        let by_neg_kl: Vec<f64> = posteriors
            .iter()
            .map(|p| score_neg_kl(p, &uniform).unwrap())
            .collect();
        let a = auroc(&ScoredSet::new(by_entropy, flags.clone()).unwrap()).unwrap();
        let b = auroc(&ScoredSet::new(by_neg_kl, flags).unwrap()).unwrap();
        auroc_pairs_equal &= a == b;
    }

    gate(
        "4/8 (entropy / uniform-KL identity)",
        worst <= tolerance && auroc_pairs_equal,
        &format!(
            "10000 posteriors, worst |−KL(P‖U) − (H(P) − ln K)| = {worst:.2e} (tolerance 1e-9); \
             ROC areas bit-identical on 50 score sets: {auroc_pairs_equal}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Gate 5: the noise samplers fit their declared distributions.
// ---------------------------------------------------------------------------

/// A vocabulary of 100 tokens where token i occurs i+1 times in training.
fn skewed_vocabulary() -> Vocabulary {
    let mut rows = Vec::new();
    let mut id = 0;
    for i in 0..100usize {
        let token = format!("w{i:03}");
        for _ in 0..=i {
            rows.push(Utterance {
                id,
                raw: token.clone(),
                tokens: vec![token.clone()],
                label: Some("a".into()),
                is_ood: false,
            });
            id += 1;
        }
    }
    Vocabulary::build(&rows, 1).unwrap()
}

#[test]
fn gate_5_noise_draws_fit_their_declared_distributions() {
    let vocab = skewed_vocabulary();
    let n_tokens = vocab.len() - RESERVED.len();
    assert_eq!(n_tokens, 100, "the alphabet is the 100 real tokens");
    let draws = 100_000usize;
    let critical = ChiSquared::new((n_tokens - 1) as f64)
        .unwrap()
        .inverse_cdf(0.999);

    let mut stats = Vec::new();
    let mut fits = true;
    for (kind, seed) in [
        (NoiseKind::Uniform, 51u64),
        (NoiseKind::Unigram, 52),
        (NoiseKind::Uniroot, 53),
    ] {
        let dist = NoiseDistribution::from_vocabulary(&vocab, kind).unwrap();
        assert_eq!(dist.tokens().len(), n_tokens, "{kind:?}: alphabet excludes reserved tokens");
        let position: HashMap<&str, usize> = dist
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut observed = vec![0u64; n_tokens];
        for _ in 0..draws {
            observed[position[dist.sample(&mut rng)]] += 1;
        }
        let statistic: f64 = dist
            .probs()
            .iter()
            .zip(&observed)
            .map(|(&p, &o)| {
                let expected = p * draws as f64;
                (o as f64 - expected).powi(2) / expected
            })
            .sum();
        fits &= statistic < critical;
        stats.push(format!("{kind:?} χ² {statistic:.1}"));
    }

    // The square-root weighting sits strictly between equal weighting and
    // frequency weighting: for any two tokens with different counts, its
    // probability ratio is compressed toward 1 but never reaches it.
    let unigram = NoiseDistribution::from_vocabulary(&vocab, NoiseKind::Unigram).unwrap();
    let uniroot = NoiseDistribution::from_vocabulary(&vocab, NoiseKind::Uniroot).unwrap();
    let mut interpolates = true;
    for a in 0..n_tokens {
        for b in 0..n_tokens {
            let (fa, fb) = (
                vocab.freq(RESERVED.len() + a),
                vocab.freq(RESERVED.len() + b),
            );
            if fa <= fb {
                continue;
            }
            let unigram_ratio = unigram.probs()[a] / unigram.probs()[b];
            let uniroot_ratio = uniroot.probs()[a] / uniroot.probs()[b];
            interpolates &= unigram_ratio > uniroot_ratio && uniroot_ratio > 1.0;
        }
    }

    gate(
        "5/8 (noise distributions)",
        fits && interpolates,
        &format!(
            "{} over {draws} draws each, critical value {critical:.1} at significance 0.001; \
             square-root weighting between equal and frequency weighting on all token pairs: {interpolates}",
            stats.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// Gate 6: the synthetic benchmark separates ID from OOD end to end.
// ---------------------------------------------------------------------------

#[test]
fn gate_6_the_synthetic_benchmark_separates_id_from_ood() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        data: DataSource::Synthetic {
            synth: SynthConfig {
                seed: 11,
                n_train: 900,
                n_valid_id: 200,
                n_test_id: 200,
                n_valid_ood: 100,
                n_test_ood: 100,
            },
        },
        label_mode: LabelMode::Fine,
        holdout_coverage: None,
        methods: vec!["msp".into(), "l_gen".into(), "l_gen_backlm_uniroot".into()],
        model: ModelConfig {
            min_freq: 2,
            embed_dim: 16,
            proj_dim: 32,
            hidden: 32,
            label_dim: 8,
            lm_embed_dim: 16,
            lm_hidden: 32,
            back_embed_dim: 16,
            back_hidden: 16,
            epochs: 60,
            batch_size: 8,
            ..ModelConfig::default()
        },
        p_noise: 0.5,
        seeds: vec![0, 1, 2, 3, 4],
        out_dir: dir.path().join("out"),
        cache_models: true,
    };

    let report = run_experiment(&config).unwrap();
    assert!(report.failed_seeds.is_empty(), "failed seeds: {:?}", report.failed_seeds);
    let mean_auroc = |method: &str| report.eval.methods[method].aggregate.auroc.mean;
    let msp = mean_auroc("msp");
    let l_gen = mean_auroc("l_gen");
    let llr = mean_auroc("l_gen_backlm_uniroot");

    let elapsed = start.elapsed().as_secs_f64();
    gate(
        "6/8 (synthetic end-to-end)",
        l_gen >= 0.95 && msp >= 0.80 && llr >= l_gen - 0.01 && elapsed < 600.0,
        &format!(
            "5 seeds in {elapsed:.0}s (budget 600s); AUROC: marginal likelihood {l_gen:.4} (floor 0.95), \
             max softmax probability {msp:.4} (floor 0.80), likelihood ratio {llr:.4} (floor: base − 0.01)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Gate 7: reproduction on the external corpus when its files are present.
// ---------------------------------------------------------------------------

fn external_corpus_dir() -> PathBuf {
    match std::env::var_os("INTENT_OOD_ROSTD_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => {
            let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
            manifest
                .parent()
                .and_then(|p| p.parent())
                .expect("the crate lives two levels under the repository root")
                .join("data/rostd")
        }
    }
}

#[test]
fn gate_7_external_corpus_reproduction_when_available() {
    let dir = external_corpus_dir();
    let files = ["train.tsv", "valid.tsv", "test.tsv"];
    if !files.iter().all(|f| dir.join(f).exists()) {
        println!(
            "acceptance 7/8 (external corpus): WAIVED — no label<TAB>text TSVs at {} \
             (set INTENT_OOD_ROSTD_DIR to enable); the remaining gates stand on their own",
            dir.display()
        );
        return;
    }

    let out = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        data: DataSource::Tsv {
            train: dir.join("train.tsv"),
            valid: dir.join("valid.tsv"),
            test: dir.join("test.tsv"),
            schema: "label,text".into(),
            ood_label: "outOfDomain".into(),
        },
        label_mode: LabelMode::Fine,
        holdout_coverage: None,
        methods: vec![
            "l_simple".into(),
            "l_gen".into(),
            "l_simple_backlm_uniroot".into(),
            "l_gen_backlm_uniroot".into(),
        ],
        model: ModelConfig::default(),
        p_noise: 0.5,
        seeds: vec![0, 1, 2, 3, 4],
        out_dir: out.path().join("out"),
        cache_models: true,
    };

    let report = run_experiment(&config).unwrap();
    assert!(report.failed_seeds.is_empty(), "failed seeds: {:?}", report.failed_seeds);
    let agg = |method: &str| &report.eval.methods[method].aggregate;

    let best_auroc = agg("l_gen_backlm_uniroot").auroc.mean;
    let best_fpr = agg("l_gen_backlm_uniroot").fpr_at_95_tpr.mean;
    let gen_beats_plain = agg("l_gen").auroc.mean > agg("l_simple").auroc.mean;
    let ratio_lifts_plain =
        agg("l_simple_backlm_uniroot").aupr_ood.mean > agg("l_simple").aupr_ood.mean;
    let ratio_lifts_gen =
        agg("l_gen_backlm_uniroot").aupr_ood.mean > agg("l_gen").aupr_ood.mean;

    gate(
        "7/8 (external corpus)",
        best_auroc >= 0.96
            && best_fpr <= 0.12
            && gen_beats_plain
            && ratio_lifts_plain
            && ratio_lifts_gen,
        &format!(
            "best AUROC {best_auroc:.4} (floor 0.96), FPR@95%TPR {best_fpr:.4} (ceiling 0.12); \
             marginal beats plain likelihood: {gen_beats_plain}; \
             ratio lifts average precision over both bases: {ratio_lifts_plain}/{ratio_lifts_gen}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Gate 8: the class-holdout generator covers and is minimal.
// ---------------------------------------------------------------------------

fn mock_seven_class_bundle() -> (DatasetBundle, Vec<usize>) {
    let counts = vec![40usize, 25, 15, 10, 5, 3, 2];
    let mut id = 0;
    let mut utterance = |class: usize, split: &str| {
        let token = format!("{split}{class}tok");
        let u = Utterance {
            id,
            raw: token.clone(),
            tokens: vec![token, format!("c{class}word")],
            label: Some(format!("c{class}")),
            is_ood: false,
        };
        id += 1;
        u
    };
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            train.push(utterance(class, "tr"));
        }
        for _ in 0..2 {
            valid.push(utterance(class, "va"));
            test.push(utterance(class, "te"));
        }
    }
    (DatasetBundle::assemble(train, valid, test).unwrap(), counts)
}

#[test]
fn gate_8_class_holdout_covers_and_is_minimal() {
    let (bundle, counts) = mock_seven_class_bundle();
    let total: usize = counts.iter().sum();
    let mut splits_seen: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut checked = 0usize;

    for &coverage in &[25.0f64, 75.0] {
        let need = coverage / 100.0 * total as f64;

        // Every feasible-and-minimal class subset, by checking all 2^7.
        let feasible = |mask: usize| -> bool {
            let sum: usize = (0..7).filter(|c| mask & (1 << c) != 0).map(|c| counts[c]).sum();
            sum as f64 >= need
        };
        let minimal_family: BTreeSet<usize> = (0usize..128)
            .filter(|&mask| {
                feasible(mask)
                    && (0..7).all(|c| mask & (1 << c) == 0 || !feasible(mask & !(1 << c)))
            })
            .collect();
        assert!(!minimal_family.is_empty(), "K={coverage}: no subset qualifies");

        for seed in 0..5u64 {
            let held = make_holdout_split(&bundle, coverage, seed).unwrap();
            let kept_mask: usize = held
                .labels
                .iter()
                .map(|l| {
                    let class: usize = l.trim_start_matches('c').parse().unwrap();
                    1usize << class
                })
                .sum();
            let kept_count: usize =
                (0..7).filter(|c| kept_mask & (1 << c) != 0).map(|c| counts[c]).sum();

            assert!(
                minimal_family.contains(&kept_mask),
                "K={coverage} seed {seed}: kept classes {:?} are not a minimal covering subset",
                held.labels
            );
            assert!(
                kept_count as f64 >= need,
                "K={coverage} seed {seed}: kept {kept_count} of {total} rows, needed {need}"
            );
            assert_eq!(
                held.train_id.len(),
                kept_count,
                "K={coverage} seed {seed}: held-out training rows must be deleted"
            );
            for split in [&held.valid, &held.test] {
                for u in split {
                    let kept = u
                        .label
                        .as_ref()
                        .map(|l| kept_mask & (1 << l.trim_start_matches('c').parse::<usize>().unwrap()) != 0)
                        .unwrap_or(false);
                    assert_eq!(
                        u.is_ood, !kept,
                        "K={coverage} seed {seed}: utterance {} has label {:?} but ood flag {}",
                        u.id, u.label, u.is_ood
                    );
                }
            }

            let again = make_holdout_split(&bundle, coverage, seed).unwrap();
            assert_eq!(again.labels, held.labels, "K={coverage} seed {seed}: split must be deterministic");
            splits_seen.insert(held.labels.clone());
            checked += 1;
        }
    }

    gate(
        "8/8 (class holdout)",
        splits_seen.len() >= 2,
        &format!(
            "{checked} generated splits all minimal covering subsets (verified against all 128); \
             {} distinct splits across seeds",
            splits_seen.len()
        ),
    );
}

//! Out-of-domain scores with one shared convention: higher η = more OOD.
//!
//! Every detection method reduces to a scalar η per sentence. Posterior
//! methods read the discriminative classifier's output distribution,
//! likelihood methods negate log-likelihoods, ratio methods subtract a
//! background model's log-likelihood, and the density method reads the
//! classifier's sentence features through a neighbor index. Scores travel
//! as TSV so each stage can run on a prior stage's artifacts.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lof::NeighborIndex;
use crate::metrics::ScoredSet;
use crate::models::{DiscriminativeClassifier, EncodedRow, GenerativeClassifier, LanguageModel};
use crate::neural::store::ParameterStore;
use crate::noising::NoiseKind;

/// Temperature of the flattened-posterior MSP variant.
pub const MSP_HIGH_TEMPERATURE: f64 = 1e3;

/// The closed set of detection methods. Composite variants name the noise
/// distribution their background model was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// 1 − max posterior probability.
    Msp,
    /// Same, with logits divided by 1000 first.
    MspT1e3,
    /// −KL(posterior ‖ uniform).
    NegKlU,
    /// −KL(posterior ‖ training label ratios).
    NegKlR,
    /// Local outlier factor over softmax-head sentence features.
    Lof,
    /// Local outlier factor over margin-head (cosine) sentence features.
    LofLmcl,
    /// Negative log-likelihood under the unconditional language model.
    LSimple,
    /// Log-likelihood ratio: background LM minus the unconditional LM.
    LSimpleBacklm(NoiseKind),
    /// Negative log marginal likelihood under the generative classifier.
    LGen,
    /// Log-likelihood ratio: background LM minus the generative marginal.
    LGenBacklm(NoiseKind),
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::Msp,
        Method::MspT1e3,
        Method::NegKlU,
        Method::NegKlR,
        Method::Lof,
        Method::LofLmcl,
        Method::LSimple,
        Method::LSimpleBacklm(NoiseKind::Uniform),
        Method::LSimpleBacklm(NoiseKind::Unigram),
        Method::LSimpleBacklm(NoiseKind::Uniroot),
        Method::LGen,
        Method::LGenBacklm(NoiseKind::Uniform),
        Method::LGenBacklm(NoiseKind::Unigram),
        Method::LGenBacklm(NoiseKind::Uniroot),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::MspT1e3 => "msp_t1e3",
            Method::NegKlU => "neg_kl_u",
            Method::NegKlR => "neg_kl_r",
            Method::Lof => "lof",
            Method::LofLmcl => "lof_lmcl",
            Method::LSimple => "l_simple",
            Method::LSimpleBacklm(NoiseKind::Uniform) => "l_simple_backlm_uniform",
            Method::LSimpleBacklm(NoiseKind::Unigram) => "l_simple_backlm_unigram",
            Method::LSimpleBacklm(NoiseKind::Uniroot) => "l_simple_backlm_uniroot",
            Method::LGen => "l_gen",
            Method::LGenBacklm(NoiseKind::Uniform) => "l_gen_backlm_uniform",
            Method::LGenBacklm(NoiseKind::Unigram) => "l_gen_backlm_unigram",
            Method::LGenBacklm(NoiseKind::Uniroot) => "l_gen_backlm_uniroot",
        }
    }

    /// The noise distribution of the background model, for ratio methods.
    pub fn background(self) -> Option<NoiseKind> {
        match self {
            Method::LSimpleBacklm(kind) | Method::LGenBacklm(kind) => Some(kind),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown method '{s}' (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

/// η = 1 − max class probability: confident posteriors score near 0.
pub fn score_msp(posterior: &[f64]) -> f64 {
    1.0 - posterior.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Shannon entropy in nats, with 0·ln 0 = 0. Ranges from 0 (one-hot) to
/// ln K (uniform).
pub fn score_entropy(posterior: &[f64]) -> f64 {
    -posterior
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

/// η = −KL(posterior ‖ reference): always ≤ 0, and 0 exactly when the
/// posterior matches the reference — maximal uncertainty scores highest.
pub fn score_neg_kl(posterior: &[f64], reference: &[f64]) -> Result<f64> {
    if posterior.len() != reference.len() {
        return Err(Error::Dimension(format!(
            "posterior has {} classes, reference has {}",
            posterior.len(),
            reference.len()
        )));
    }
    if let Some(i) = reference.iter().position(|r| !(*r > 0.0)) {
        return Err(Error::Data(format!(
            "reference distribution entry {i} is not positive; smooth it before scoring"
        )));
    }
    let kl: f64 = posterior
        .iter()
        .zip(reference)
        .map(|(&p, &r)| if p > 0.0 { p * (p / r).ln() } else { 0.0 })
        .sum();
    Ok(-kl)
}

/// η = −log-likelihood: improbable sentences score high.
pub fn score_neg_loglik(log_likelihood: f64) -> f64 {
    -log_likelihood
}

/// η = log P_background(x) − log P_main(x): positive when the noise-trained
/// background explains the sentence better than the in-domain model.
pub fn score_llr(main_loglik: f64, background_loglik: f64) -> f64 {
    background_loglik - main_loglik
}

/// LOF of each sentence's classifier features against an index built from
/// in-domain training features. Raw scores — may be +∞ in degenerate
/// geometry; [`OodScore::new`] clamps before metrics see them.
pub fn score_lof(
    store: &ParameterStore,
    classifier: &DiscriminativeClassifier,
    index: &NeighborIndex,
    rows: &[EncodedRow],
) -> Vec<f64> {
    index.lof_batch(&classifier.penultimate_features(store, rows))
}

/// Likelihood-ratio scores with the unconditional LM as the main model.
pub fn llr_lm_scores(
    main_store: &ParameterStore,
    main: &LanguageModel,
    back_store: &ParameterStore,
    background: &LanguageModel,
    rows: &[EncodedRow],
) -> Result<Vec<f64>> {
    check_vocab(main.config.vocab_size, background.config.vocab_size)?;
    let m = main.log_likelihoods(main_store, rows);
    let b = background.log_likelihoods(back_store, rows);
    Ok(m.iter().zip(&b).map(|(&m, &b)| score_llr(m, b)).collect())
}

/// Likelihood-ratio scores with the generative marginal as the main model.
pub fn llr_gen_scores(
    main_store: &ParameterStore,
    main: &GenerativeClassifier,
    back_store: &ParameterStore,
    background: &LanguageModel,
    rows: &[EncodedRow],
) -> Result<Vec<f64>> {
    check_vocab(main.config.vocab_size, background.config.vocab_size)?;
    let m = main.marginal_logliks(main_store, rows);
    let b = background.log_likelihoods(back_store, rows);
    Ok(m.iter().zip(&b).map(|(&m, &b)| score_llr(m, b)).collect())
}

fn check_vocab(main: usize, background: usize) -> Result<()> {
    if main != background {
        return Err(Error::Config(format!(
            "main and background models read different vocabularies ({main} vs {background} entries)"
        )));
    }
    Ok(())
}

/// Replace ±∞ with the largest finite values so downstream ranking metrics
/// stay well-defined; finite scores pass through untouched.
pub fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(f64::MIN, f64::MAX)
}

/// One sentence's score under one method, with its ground-truth flag.
#[derive(Debug, Clone, PartialEq)]
pub struct OodScore {
    pub utterance_id: u64,
    pub method: Method,
    pub eta: f64,
    pub is_ood: bool,
}

impl OodScore {
    pub fn new(utterance_id: u64, method: Method, eta: f64, is_ood: bool) -> OodScore {
        OodScore {
            utterance_id,
            method,
            eta: clamp_eta(eta),
            is_ood,
        }
    }
}

const TSV_HEADER: &str = "utterance_id\tmethod\teta\tis_ood";

/// Write scores as TSV (`utterance_id<TAB>method<TAB>eta<TAB>is_ood`).
/// η uses the shortest decimal form that parses back to the same f64, so
/// a read of the file reproduces the scores exactly.
pub fn write_scores(path: &Path, scores: &[OodScore]) -> Result<()> {
    let mut out = String::with_capacity(scores.len() * 32 + TSV_HEADER.len() + 1);
    out.push_str(TSV_HEADER);
    out.push('\n');
    for s in scores {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.utterance_id,
            s.method,
            s.eta,
            if s.is_ood { 1 } else { 0 }
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<OodScore>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header '{TSV_HEADER}'"),
            })
        }
    }
    let mut scores = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("{what}: '{line}'"),
        };
        let mut fields = line.split('\t');
        let (id, method, eta, ood) = match (
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
        ) {
            (Some(a), Some(b), Some(c), Some(d), None) => (a, b, c, d),
            _ => return Err(bad("expected 4 tab-separated fields")),
        };
        scores.push(OodScore {
            utterance_id: id.parse().map_err(|_| bad("bad utterance id"))?,
            method: method.parse()?,
            eta: eta.parse().map_err(|_| bad("bad score"))?,
            is_ood: match ood {
                "0" => false,
                "1" => true,
                _ => return Err(bad("is_ood must be 0 or 1")),
            },
        });
    }
    Ok(scores)
}

/// Collect one method's scores into a metric-ready set. Errors if the
/// method is absent or only one class is present.
pub fn scored_set(scores: &[OodScore], method: Method) -> Result<ScoredSet> {
    let pairs: Vec<(f64, bool)> = scores
        .iter()
        .filter(|s| s.method == method)
        .map(|s| (s.eta, s.is_ood))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!("no scores recorded for method '{method}'")));
    }
    ScoredSet::from_pairs(pairs)
}

/// The distinct methods present, in the canonical reporting order.
pub fn methods_present(scores: &[OodScore]) -> Vec<Method> {
    let seen: BTreeSet<&str> = scores.iter().map(|s| s.method.name()).collect();
    Method::ALL
        .into_iter()
        .filter(|m| seen.contains(m.name()))
        .collect()
}

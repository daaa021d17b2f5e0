//! Word-substitution noise for background language model training.
//!
//! Each token of a sentence is independently replaced with probability
//! `p_noise` by a word drawn from a substitution distribution over the
//! vocabulary: `Uniform` (every word equally likely), `Unigram`
//! (proportional to training frequency), or `Uniroot` (proportional to the
//! square root of training frequency, interpolating the other two).
//! Sampling uses Vose's alias method, so a draw is O(1) and a corpus pass
//! is linear. Noise is re-rolled per epoch: each utterance gets its own RNG
//! stream keyed by (base seed, utterance id, epoch), which makes the result
//! independent of iteration order and safe to parallelize.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::corpus::{Utterance, Vocabulary, RESERVED};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Uniform,
    Unigram,
    Uniroot,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Uniform, NoiseKind::Unigram, NoiseKind::Uniroot];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::Unigram => "unigram",
            NoiseKind::Uniroot => "uniroot",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseKind::Uniform),
            "unigram" => Ok(NoiseKind::Unigram),
            "uniroot" => Ok(NoiseKind::Uniroot),
            other => Err(Error::Config(format!(
                "unknown noise kind '{other}' (expected uniform, unigram, or uniroot)"
            ))),
        }
    }
}

/// A categorical distribution over substitute words, sampled in O(1) via
/// Vose's alias method.
#[derive(Debug, Clone)]
pub struct NoiseDistribution {
    tokens: Vec<String>,
    /// Normalized probability of each token, kept for inspection and tests.
    probs: Vec<f64>,
    /// Alias table: accept index i with probability `accept[i]`, otherwise
    /// emit `alias[i]`.
    accept: Vec<f64>,
    alias: Vec<usize>,
}

impl NoiseDistribution {
    /// Distribution over the vocabulary's non-reserved words with weights
    /// chosen by `kind` from training frequencies.
    pub fn from_vocabulary(vocab: &Vocabulary, kind: NoiseKind) -> Result<NoiseDistribution> {
        let mut tokens = Vec::with_capacity(vocab.content_len());
        let mut weights = Vec::with_capacity(vocab.content_len());
        for id in RESERVED.len()..vocab.len() {
            let f = vocab.freq(id) as f64;
            tokens.push(vocab.token(id).to_string());
            weights.push(match kind {
                NoiseKind::Uniform => 1.0,
                NoiseKind::Unigram => f,
                NoiseKind::Uniroot => f.sqrt(),
            });
        }
        NoiseDistribution::from_weights(tokens, &weights)
    }

    /// Distribution from explicit non-negative weights (need not sum to 1).
    pub fn from_weights(tokens: Vec<String>, weights: &[f64]) -> Result<NoiseDistribution> {
        if tokens.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} tokens but {} weights",
                tokens.len(),
                weights.len()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Data("substitution distribution has no words".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Numeric(format!(
                "substitution weights must sum to a positive finite value, got {total}"
            )));
        }
        if let Some(w) = weights.iter().find(|w| **w < 0.0 || !w.is_finite()) {
            return Err(Error::Numeric(format!("bad substitution weight {w}")));
        }
        let n = tokens.len();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();

        // Vose's alias construction: scale to mean 1, pair sub-unit entries
        // with super-unit donors.
        let mut accept: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
        let mut alias: Vec<usize> = (0..n).collect();
        let mut small: Vec<usize> = Vec::new();
        let mut large: Vec<usize> = Vec::new();
        for (i, &a) in accept.iter().enumerate() {
            if a < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(s), Some(l)) = (small.pop(), large.pop()) {
            alias[s] = l;
            accept[l] = (accept[l] + accept[s]) - 1.0;
            if accept[l] < 1.0 {
                small.push(l);
            } else {
                large.push(l);
            }
        }
        // Leftovers are exactly 1 up to rounding.
        for i in small.into_iter().chain(large) {
            accept[i] = 1.0;
        }
        Ok(NoiseDistribution {
            tokens,
            probs,
            accept,
            alias,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Normalized probability of each word, aligned with `tokens()`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<'a>(&'a self, rng: &mut impl Rng) -> &'a str {
        let i = rng.gen_range(0..self.tokens.len());
        let u: f64 = rng.gen();
        let idx = if u < self.accept[i] { i } else { self.alias[i] };
        &self.tokens[idx]
    }
}

/// Replace each token independently with probability `p_noise` by a draw
/// from `dist`. Length is preserved.
pub fn noise_tokens(
    tokens: &[String],
    dist: &NoiseDistribution,
    p_noise: f64,
    rng: &mut impl Rng,
) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            if rng.gen::<f64>() < p_noise {
                dist.sample(rng).to_string()
            } else {
                t.clone()
            }
        })
        .collect()
}

/// Seed for one utterance's noise stream in one epoch.
fn stream_seed(base_seed: u64, utterance_id: u64, epoch: u64) -> u64 {
    crate::seeding::mix(base_seed, &[utterance_id, epoch])
}

/// Noise a whole corpus for one training epoch. Labels are dropped: the
/// noised text exists only to train an unconditional background model. The
/// result depends on (base_seed, epoch) and each row's id, not on ordering.
pub fn noise_corpus(
    rows: &[Utterance],
    dist: &NoiseDistribution,
    p_noise: f64,
    base_seed: u64,
    epoch: u64,
) -> Result<Vec<Utterance>> {
    if !(0.0..=1.0).contains(&p_noise) {
        return Err(Error::Config(format!(
            "noise probability must lie in [0, 1], got {p_noise}"
        )));
    }
    let noise_one = |u: &Utterance| -> Utterance {
        let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(base_seed, u.id, epoch));
        let tokens = noise_tokens(&u.tokens, dist, p_noise, &mut rng);
        Utterance {
            id: u.id,
            raw: tokens.join(" "),
            tokens,
            label: None,
            is_ood: u.is_ood,
        }
    };
    #[cfg(feature = "parallel")]
    let out = rows.par_iter().map(noise_one).collect();
    #[cfg(not(feature = "parallel"))]
    let out = rows.iter().map(noise_one).collect();
    Ok(out)
}

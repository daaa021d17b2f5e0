//! Synthetic benchmark: three intent classes drawn from token-bigram
//! grammars over pairwise-disjoint content vocabularies, plus an OOD pool
//! from a fourth grammar whose content words never appear in-domain. A
//! small set of function words is shared by all four grammars, so OOD
//! sentences are foreign in content but not in glue.
//!
//! The construction makes detection learnable but not given away: every
//! generated sentence is plausible surface text, and only the trained
//! models know which words belong. Two corpus statistics are deliberately
//! controlled: content length varies only slightly, so likelihood methods
//! are not dominated by sentence-length variance, and each grammar salts
//! sentences with singleton "rare" tokens so a frequency cutoff produces
//! unknown-token positions in training text, the way real corpora do.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_split, DatasetBundle, Utterance, DEFAULT_OOD_LABEL};
use crate::error::Result;
use crate::seeding;

/// Words every grammar may emit between content words.
pub const FUNCTION_WORDS: [&str; 6] = ["the", "to", "a", "is", "please", "now"];

/// Content vocabulary size of each grammar.
const GRAMMAR_VOCAB: usize = 24;

/// Per-grammar pool of rare decoration tokens. The pool is large relative
/// to how often decorations are drawn, so most appear at most once in a
/// training set and fall below any frequency cutoff above 1.
const RARE_POOL: usize = 80;

/// Probability that a sentence carries one rare decoration token.
const RARE_PROB: f64 = 0.12;

/// Word stems: three in-domain classes and the held-out fourth grammar.
const STEMS: [&str; 4] = ["timer", "weather", "playlist", "visa"];

/// Class labels for the three in-domain grammars.
pub const CLASS_LABELS: [&str; 3] = ["set_timer", "check_weather", "play_music"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Data-generation seed — independent of model seeds, so every model
    /// seed trains on the same dataset.
    pub seed: u64,
    pub n_train: usize,
    pub n_valid_id: usize,
    pub n_test_id: usize,
    pub n_valid_ood: usize,
    pub n_test_ood: usize,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            seed: 0,
            n_train: 3000,
            n_valid_id: 600,
            n_test_id: 600,
            n_valid_ood: 300,
            n_test_ood: 300,
        }
    }
}

/// One bigram grammar: a content vocabulary and an affine successor map.
/// From content word `i` the chain moves to `a·i + b (mod V)` with
/// probability 0.7 (else a uniform content word), each gap emits a shared
/// function word with probability 0.25, and a sentence carries one rare
/// decoration token with probability [`RARE_PROB`].
struct Grammar {
    words: Vec<String>,
    rare: Vec<String>,
    a: usize,
    b: usize,
}

impl Grammar {
    fn new(index: usize) -> Grammar {
        // Multipliers coprime with the vocabulary size keep the successor
        // map a permutation, so every class has a full-cycle backbone.
        let (a, b) = [(5, 3), (7, 11), (11, 5), (13, 7)][index];
        Grammar {
            words: (0..GRAMMAR_VOCAB)
                .map(|i| format!("{}{i:02}", STEMS[index]))
                .collect(),
            rare: (0..RARE_POOL)
                .map(|i| format!("{}x{i:02}", STEMS[index]))
                .collect(),
            a,
            b,
        }
    }

    fn sentence(&self, rng: &mut ChaCha12Rng) -> Vec<String> {
        let n_content = rng.gen_range(5..=7);
        let mut tokens = Vec::with_capacity(2 * n_content);
        let mut state = rng.gen_range(0..GRAMMAR_VOCAB);
        for step in 0..n_content {
            if step > 0 && rng.gen_bool(0.25) {
                tokens.push(FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())].to_string());
            }
            tokens.push(self.words[state].clone());
            state = if rng.gen_bool(0.7) {
                (self.a * state + self.b) % GRAMMAR_VOCAB
            } else {
                rng.gen_range(0..GRAMMAR_VOCAB)
            };
        }
        if rng.gen_bool(RARE_PROB) {
            let slot = rng.gen_range(0..=tokens.len());
            tokens.insert(slot, self.rare[rng.gen_range(0..RARE_POOL)].clone());
        }
        tokens
    }
}

fn utterance(id: u64, tokens: Vec<String>, label: Option<&str>) -> Utterance {
    Utterance {
        id,
        raw: tokens.join(" "),
        tokens,
        label: label.map(str::to_string),
        is_ood: label.is_none(),
    }
}

/// Generate the benchmark in memory. Deterministic in the config: each
/// split draws from its own seeded stream, so resizing one split leaves
/// the others' sentences unchanged.
pub fn emit_synthetic_benchmark(config: &SynthConfig) -> Result<DatasetBundle> {
    let grammars: Vec<Grammar> = (0..4).map(Grammar::new).collect();
    let mut next_id = 0u64;
    let mut id_rows = |split_tag: u64, n: usize| -> Vec<Utterance> {
        let mut rng = ChaCha12Rng::seed_from_u64(seeding::mix(config.seed, &[split_tag]));
        (0..n)
            .map(|i| {
                let class = i % CLASS_LABELS.len();
                let id = next_id;
                next_id += 1;
                utterance(
                    id,
                    grammars[class].sentence(&mut rng),
                    Some(CLASS_LABELS[class]),
                )
            })
            .collect()
    };
    let train = id_rows(1, config.n_train);
    let mut valid = id_rows(2, config.n_valid_id);
    let mut test = id_rows(3, config.n_test_id);

    let mut ood_rows = |split_tag: u64, n: usize| -> Vec<Utterance> {
        let mut rng = ChaCha12Rng::seed_from_u64(seeding::mix(config.seed, &[split_tag]));
        (0..n)
            .map(|_| {
                let id = next_id;
                next_id += 1;
                utterance(id, grammars[3].sentence(&mut rng), None)
            })
            .collect()
    };
    valid.extend(ood_rows(4, config.n_valid_ood));
    test.extend(ood_rows(5, config.n_test_ood));

    let bundle = DatasetBundle::assemble(train, valid, test)?;
    bundle.validate()?;
    Ok(bundle)
}

/// Generate and write the benchmark as `train.tsv`, `valid.tsv`,
/// `test.tsv` (label<TAB>text; OOD rows carry the sentinel label).
pub fn write_synthetic_benchmark(dir: &Path, config: &SynthConfig) -> Result<DatasetBundle> {
    let bundle = emit_synthetic_benchmark(config)?;
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    write_split(&dir.join("train.tsv"), &bundle.train_id, DEFAULT_OOD_LABEL)?;
    write_split(&dir.join("valid.tsv"), &bundle.valid, DEFAULT_OOD_LABEL)?;
    write_split(&dir.join("test.tsv"), &bundle.test, DEFAULT_OOD_LABEL)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn content_tokens<'a>(rows: impl Iterator<Item = &'a Utterance>) -> BTreeSet<&'a str> {
        rows.flat_map(|u| u.tokens.iter())
            .map(String::as_str)
            .filter(|t| !FUNCTION_WORDS.contains(t))
            .collect()
    }

    #[test]
    fn default_sizes_and_structure_hold() {
        let bundle = emit_synthetic_benchmark(&SynthConfig::default()).unwrap();
        assert_eq!(bundle.train_id.len(), 3000);
        assert_eq!(bundle.valid.len(), 900);
        assert_eq!(bundle.test.len(), 900);
        assert_eq!(bundle.valid.iter().filter(|u| u.is_ood).count(), 300);
        assert_eq!(bundle.test.iter().filter(|u| u.is_ood).count(), 300);
        assert_eq!(bundle.labels.len(), 3);
        assert_eq!(bundle.class_counts, vec![1000; 3]);
        let ids: BTreeSet<u64> = bundle
            .train_id
            .iter()
            .chain(&bundle.valid)
            .chain(&bundle.test)
            .map(|u| u.id)
            .collect();
        assert_eq!(ids.len(), 4800, "utterance ids are unique");
    }

    #[test]
    fn class_vocabularies_are_pairwise_disjoint() {
        let bundle = emit_synthetic_benchmark(&SynthConfig::default()).unwrap();
        let per_class: Vec<BTreeSet<&str>> = CLASS_LABELS
            .iter()
            .map(|label| {
                content_tokens(
                    bundle
                        .train_id
                        .iter()
                        .filter(|u| u.label.as_deref() == Some(label)),
                )
            })
            .collect();
        for i in 0..per_class.len() {
            for j in i + 1..per_class.len() {
                assert!(
                    per_class[i].is_disjoint(&per_class[j]),
                    "classes {i} and {j} share content words"
                );
            }
        }
    }

    #[test]
    fn ood_content_never_appears_in_domain() {
        let bundle = emit_synthetic_benchmark(&SynthConfig::default()).unwrap();
        let id_content = content_tokens(
            bundle
                .train_id
                .iter()
                .chain(bundle.valid.iter().filter(|u| !u.is_ood))
                .chain(bundle.test.iter().filter(|u| !u.is_ood)),
        );
        let ood_content = content_tokens(
            bundle
                .valid
                .iter()
                .chain(&bundle.test)
                .filter(|u| u.is_ood),
        );
        assert!(!ood_content.is_empty());
        assert!(
            id_content.is_disjoint(&ood_content),
            "an OOD content word leaked into the in-domain splits"
        );
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = emit_synthetic_benchmark(&SynthConfig::default()).unwrap();
        let b = emit_synthetic_benchmark(&SynthConfig::default()).unwrap();
        assert_eq!(a.train_id, b.train_id);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);

        let other = emit_synthetic_benchmark(&SynthConfig {
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(
            a.train_id, other.train_id,
            "a different seed draws different sentences"
        );
    }

    #[test]
    fn sentences_stay_within_the_grammar_length_bounds() {
        let bundle = emit_synthetic_benchmark(&SynthConfig::default()).unwrap();
        for u in bundle.train_id.iter().chain(&bundle.valid).chain(&bundle.test) {
            // 5–7 grammar words plus at most one rare decoration.
            let content = u
                .tokens
                .iter()
                .filter(|t| !FUNCTION_WORDS.contains(&t.as_str()))
                .count();
            assert!((5..=8).contains(&content), "content length {content}");
            assert!(u.tokens.len() <= 14, "total length {}", u.tokens.len());
        }
    }

    #[test]
    fn frequency_cutoff_turns_rare_decorations_into_unknowns() {
        use crate::corpus::{Vocabulary, UNK_ID};

        let bundle = emit_synthetic_benchmark(&SynthConfig::default()).unwrap();
        let decorated = bundle
            .train_id
            .iter()
            .filter(|u| u.tokens.iter().any(|t| t.contains('x')))
            .count();
        let rate = decorated as f64 / bundle.train_id.len() as f64;
        assert!(
            (0.06..=0.20).contains(&rate),
            "about one sentence in eight should carry a rare token, got {rate:.3}"
        );

        let vocab = Vocabulary::build(&bundle.train_id, 2).unwrap();
        let unk_rows = bundle
            .train_id
            .iter()
            .filter(|u| vocab.encode(&u.tokens).contains(&UNK_ID))
            .count();
        assert!(
            unk_rows > bundle.train_id.len() / 50,
            "a min-frequency cutoff of 2 must leave unknown tokens in training \
             text, got {unk_rows} rows"
        );
        assert!(
            unk_rows < decorated,
            "some rare tokens repeat and must survive the cutoff"
        );
    }

    #[test]
    fn the_bigram_backbone_dominates_successions() {
        let bundle = emit_synthetic_benchmark(&SynthConfig::default()).unwrap();
        // Within class 0 (a=5, b=3), count how often the successor of a
        // content word is its backbone successor, skipping function words.
        let grammar = Grammar::new(0);
        let (mut backbone, mut total) = (0usize, 0usize);
        for u in bundle
            .train_id
            .iter()
            .filter(|u| u.label.as_deref() == Some(CLASS_LABELS[0]))
        {
            let content: Vec<usize> = u
                .tokens
                .iter()
                .filter_map(|t| grammar.words.iter().position(|w| w == t))
                .collect();
            for pair in content.windows(2) {
                total += 1;
                if pair[1] == (5 * pair[0] + 3) % GRAMMAR_VOCAB {
                    backbone += 1;
                }
            }
        }
        let rate = backbone as f64 / total as f64;
        assert!(
            rate > 0.6,
            "backbone successions are the grammar's signal, got rate {rate:.3}"
        );
    }

    #[test]
    fn written_benchmark_reloads_identically() {
        use crate::corpus::{load_tsv, TsvSchema};

        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            n_train: 60,
            n_valid_id: 30,
            n_test_id: 30,
            n_valid_ood: 12,
            n_test_ood: 12,
            ..SynthConfig::default()
        };
        let bundle = write_synthetic_benchmark(dir.path(), &config).unwrap();
        let schema = TsvSchema::parse("label,text").unwrap();
        let mut next_id = 0;
        let train = load_tsv(
            &dir.path().join("train.tsv"),
            &schema,
            DEFAULT_OOD_LABEL,
            &mut next_id,
        )
        .unwrap();
        let valid = load_tsv(
            &dir.path().join("valid.tsv"),
            &schema,
            DEFAULT_OOD_LABEL,
            &mut next_id,
        )
        .unwrap();
        assert_eq!(train.len(), 60);
        assert_eq!(valid.iter().filter(|u| u.is_ood).count(), 12);
        let tokens = |rows: &[Utterance]| -> Vec<Vec<String>> {
            rows.iter().map(|u| u.tokens.clone()).collect()
        };
        assert_eq!(tokens(&train), tokens(&bundle.train_id), "tokens survive the disk trip");
    }
}

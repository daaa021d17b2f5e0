//! Dataset ingestion and split synthesis for intent corpora.
//!
//! Utterances come from tab-separated files with a configurable column
//! layout. Out-of-domain rows are marked by a sentinel label (default
//! `outOfDomain`) and carry no class label of their own. From labeled data
//! we can also synthesize an OOD setting by holding out intent classes.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Default OOD sentinel used in TSV label columns.
pub const DEFAULT_OOD_LABEL: &str = "outOfDomain";

/// One sentence with an optional hierarchical intent label.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub raw: String,
    pub tokens: Vec<String>,
    /// Absent for OOD utterances.
    pub label: Option<String>,
    pub is_ood: bool,
}

/// Column layout of an input TSV. `_` marks ignored columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TsvSchema {
    columns: Vec<Column>,
    label_idx: usize,
    text_idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Column {
    Label,
    Text,
    Skip,
}

impl TsvSchema {
    /// Parse a schema string such as `label,text` or `label,_,text`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut columns = Vec::new();
        let mut label_idx = None;
        let mut text_idx = None;
        for (i, part) in spec.split(',').enumerate() {
            match part.trim() {
                "label" => {
                    if label_idx.replace(i).is_some() {
                        return Err(Error::Config("schema has two label columns".into()));
                    }
                    columns.push(Column::Label);
                }
                "text" => {
                    if text_idx.replace(i).is_some() {
                        return Err(Error::Config("schema has two text columns".into()));
                    }
                    columns.push(Column::Text);
                }
                "_" => columns.push(Column::Skip),
                other => {
                    return Err(Error::Config(format!(
                        "unknown schema column '{other}' (expected label, text, or _)"
                    )))
                }
            }
        }
        match (label_idx, text_idx) {
            (Some(l), Some(t)) => Ok(TsvSchema {
                columns,
                label_idx: l,
                text_idx: t,
            }),
            _ => Err(Error::Config(
                "schema must name both a label and a text column".into(),
            )),
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

impl Default for TsvSchema {
    fn default() -> Self {
        TsvSchema::parse("label,text").expect("default schema")
    }
}

/// Lowercase, whitespace-split, detach punctuation into separate tokens.
/// Clitics keep their apostrophe: `what's` becomes `what`, `'s`.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in raw.split_whitespace() {
        push_piece(&piece.to_lowercase(), &mut out);
    }
    out
}

fn is_detached_punct(c: char) -> bool {
    !c.is_alphanumeric() && c != '\''
}

fn push_piece(piece: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = piece.chars().collect();
    let mut start = 0;
    let mut end = chars.len();
    while start < end && is_detached_punct(chars[start]) {
        out.push(chars[start].to_string());
        start += 1;
    }
    let mut trailing = Vec::new();
    while end > start && is_detached_punct(chars[end - 1]) {
        trailing.push(chars[end - 1].to_string());
        end -= 1;
    }
    if start < end {
        let mut seg = String::new();
        for &c in &chars[start..end] {
            if c == '\'' && !seg.is_empty() {
                out.push(std::mem::take(&mut seg));
            }
            seg.push(c);
        }
        if !seg.is_empty() {
            out.push(seg);
        }
    }
    trailing.reverse();
    out.append(&mut trailing);
}

/// Read one TSV file into utterances. Rows whose text tokenizes to nothing
/// are dropped with a warning; rows with the wrong column count are a hard
/// error. `next_id` assigns ids unique across multiple files.
pub fn load_tsv(
    path: &Path,
    schema: &TsvSchema,
    ood_label: &str,
    next_id: &mut u64,
) -> Result<Vec<Utterance>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != schema.width() {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                message: format!(
                    "expected {} tab-separated columns, found {}",
                    schema.width(),
                    fields.len()
                ),
            });
        }
        let label_field = fields[schema.label_idx].trim();
        let text = fields[schema.text_idx];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            log::warn!("{}:{}: empty text, row dropped", path.display(), lineno + 1);
            continue;
        }
        let is_ood = label_field == ood_label;
        out.push(Utterance {
            id: *next_id,
            raw: text.to_string(),
            tokens,
            label: if is_ood {
                None
            } else {
                Some(label_field.to_string())
            },
            is_ood,
        });
        *next_id += 1;
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{}: no usable rows",
            path.display()
        )));
    }
    Ok(out)
}

/// Token/id maps with training-set frequency counts. Ids 0..=3 are the
/// reserved PAD, UNK, BOS, EOS tokens in that order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    freq: Vec<u64>,
}

impl Vocabulary {
    /// Build from training utterances. Tokens below `min_freq` are left out
    /// and encode to UNK. Non-reserved ids follow first-occurrence order.
    pub fn build(train: &[Utterance], min_freq: u64) -> Result<Vocabulary> {
        if train.is_empty() {
            return Err(Error::Data("cannot build vocabulary from empty training set".into()));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for u in train {
            for t in &u.tokens {
                let e = counts.entry(t.as_str()).or_insert(0);
                if *e == 0 {
                    order.push(t.as_str());
                }
                *e += 1;
            }
        }
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freq: Vec<u64> = vec![0; RESERVED.len()];
        for tok in order {
            let c = counts[tok];
            if c >= min_freq {
                id_to_token.push(tok.to_string());
                freq.push(c);
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            freq,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Number of non-reserved tokens.
    pub fn content_len(&self) -> usize {
        self.len() - RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Training-set count of the token at `id` (0 for reserved ids).
    pub fn freq(&self, id: usize) -> u64 {
        self.freq[id]
    }

    /// BOS + token ids (UNK for out-of-vocabulary) + EOS.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS_ID);
        for t in tokens {
            ids.push(self.id(t).unwrap_or(UNK_ID));
        }
        ids.push(EOS_ID);
        ids
    }

    /// Inverse of encode: surface tokens with UNK kept as its surface form.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != BOS_ID && i != EOS_ID && i != PAD_ID)
            .map(|&i| self.id_to_token[i].clone())
            .collect()
    }

    /// One `token<TAB>id<TAB>freq` line per token, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        for (i, tok) in self.id_to_token.iter().enumerate() {
            buf.push_str(&format!("{tok}\t{i}\t{}\n", self.freq[i]));
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut id_to_token = Vec::new();
        let mut freq = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            let mut parts = line.split('\t');
            let (Some(tok), Some(id), Some(f)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    message: "expected token<TAB>id<TAB>freq".into(),
                });
            };
            let id: usize = id.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                message: format!("bad id '{id}'"),
            })?;
            if id != id_to_token.len() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    message: format!("ids out of order: expected {}, found {id}", id_to_token.len()),
                });
            }
            id_to_token.push(tok.to_string());
            freq.push(f.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                message: format!("bad frequency '{f}'"),
            })?);
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Data(format!(
                    "{}: reserved token {r} missing at id {i}",
                    path.display()
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            freq,
        })
    }
}

/// Train/valid/test splits plus the ordered ID label set and per-label
/// training counts. Training rows are all in-domain; valid and test may mix
/// ID and OOD rows.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train_id: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub labels: Vec<String>,
    pub class_counts: Vec<usize>,
}

impl DatasetBundle {
    pub fn assemble(
        train: Vec<Utterance>,
        valid: Vec<Utterance>,
        test: Vec<Utterance>,
    ) -> Result<DatasetBundle> {
        if let Some(u) = train.iter().find(|u| u.is_ood) {
            return Err(Error::Data(format!(
                "training split contains an OOD row (utterance {})",
                u.id
            )));
        }
        if let Some(u) = train.iter().find(|u| u.label.is_none()) {
            return Err(Error::Data(format!(
                "training split contains an unlabeled row (utterance {})",
                u.id
            )));
        }
        let mut bundle = DatasetBundle {
            train_id: train,
            valid,
            test,
            labels: Vec::new(),
            class_counts: Vec::new(),
        };
        bundle.recompute_labels();
        Ok(bundle)
    }

    /// Rebuild the sorted label set and training class counts from rows.
    fn recompute_labels(&mut self) {
        let mut labels: Vec<String> = Vec::new();
        for u in self
            .train_id
            .iter()
            .chain(self.valid.iter())
            .chain(self.test.iter())
        {
            if let Some(l) = &u.label {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
        }
        labels.sort();
        let mut counts = vec![0usize; labels.len()];
        for u in &self.train_id {
            if let Some(l) = &u.label {
                let idx = labels.binary_search(l).expect("train label in label set");
                counts[idx] += 1;
            }
        }
        self.labels = labels;
        self.class_counts = counts;
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Training-set label ratios (the prior over ID classes).
    pub fn label_ratios(&self) -> Vec<f64> {
        let total: usize = self.class_counts.iter().sum();
        self.class_counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }

    /// Check the structural invariants; used by tests and after synthesis.
    pub fn validate(&self) -> Result<()> {
        if self.train_id.iter().any(|u| u.is_ood) {
            return Err(Error::Data("train split contains OOD rows".into()));
        }
        let total: usize = self.class_counts.iter().sum();
        if total != self.train_id.len() {
            return Err(Error::Data(format!(
                "class counts sum to {total}, train has {} rows",
                self.train_id.len()
            )));
        }
        for u in self
            .train_id
            .iter()
            .chain(self.valid.iter())
            .chain(self.test.iter())
        {
            if u.tokens.is_empty() {
                return Err(Error::Data(format!("utterance {} has no tokens", u.id)));
            }
            if u.is_ood && u.label.is_some() {
                return Err(Error::Data(format!("OOD utterance {} carries a label", u.id)));
            }
            if let Some(l) = &u.label {
                if self.label_id(l).is_none() {
                    return Err(Error::Data(format!(
                        "utterance {} label '{l}' missing from label set",
                        u.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Replace every hierarchical label by its first `separator`-delimited
/// component and recompute the label set.
pub fn coarsen_labels(bundle: &DatasetBundle, separator: char) -> Result<DatasetBundle> {
    let coarsen = |u: &Utterance| -> Result<Utterance> {
        let mut out = u.clone();
        if let Some(l) = &u.label {
            let first = l.split(separator).next().unwrap_or("");
            if first.is_empty() {
                return Err(Error::Data(format!(
                    "label '{l}' has no leading component under separator '{separator}'"
                )));
            }
            out.label = Some(first.to_string());
        }
        Ok(out)
    };
    let mut out = DatasetBundle {
        train_id: bundle.train_id.iter().map(coarsen).collect::<Result<_>>()?,
        valid: bundle.valid.iter().map(coarsen).collect::<Result<_>>()?,
        test: bundle.test.iter().map(coarsen).collect::<Result<_>>()?,
        labels: Vec::new(),
        class_counts: Vec::new(),
    };
    out.recompute_labels();
    Ok(out)
}

/// Synthesize an OOD setting from fully labeled data: keep a random class
/// subset that covers at least `coverage_percent` of the training rows and
/// is minimal under removal of any single kept class. Held-out classes are
/// dropped from training and relabeled OOD in valid/test.
pub fn make_holdout_split(
    bundle: &DatasetBundle,
    coverage_percent: f64,
    rng_seed: u64,
) -> Result<DatasetBundle> {
    if !(0.0 < coverage_percent && coverage_percent < 100.0) {
        return Err(Error::Config(format!(
            "holdout coverage must be in (0, 100), got {coverage_percent}"
        )));
    }
    if bundle.valid.iter().chain(bundle.test.iter()).any(|u| u.is_ood) {
        return Err(Error::Data(
            "holdout synthesis requires a dataset without pre-existing OOD rows".into(),
        ));
    }
    let total: usize = bundle.class_counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let need = coverage_percent / 100.0 * total as f64;

    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..bundle.labels.len()).collect();
    order.shuffle(&mut rng);

    let mut kept: Vec<usize> = Vec::new();
    let mut covered = 0usize;
    for &c in &order {
        if (covered as f64) >= need {
            break;
        }
        kept.push(c);
        covered += bundle.class_counts[c];
    }
    if (covered as f64) < need {
        return Err(Error::Data(format!(
            "no class subset covers {coverage_percent}% of training rows"
        )));
    }
    // Prune until removing any kept class would fall below the target.
    let prune_order = kept.clone();
    for c in prune_order {
        let without = covered - bundle.class_counts[c];
        if without as f64 >= need {
            kept.retain(|&x| x != c);
            covered = without;
        }
    }

    let keep = |label: &str| -> bool {
        bundle
            .label_id(label)
            .map(|i| kept.contains(&i))
            .unwrap_or(false)
    };
    let train_id: Vec<Utterance> = bundle
        .train_id
        .iter()
        .filter(|u| u.label.as_deref().map(keep).unwrap_or(false))
        .cloned()
        .collect();
    let relabel = |u: &Utterance| -> Utterance {
        let mut out = u.clone();
        if !out.label.as_deref().map(keep).unwrap_or(false) {
            out.label = None;
            out.is_ood = true;
        }
        out
    };
    let mut out = DatasetBundle {
        train_id,
        valid: bundle.valid.iter().map(relabel).collect(),
        test: bundle.test.iter().map(relabel).collect(),
        labels: Vec::new(),
        class_counts: Vec::new(),
    };
    out.recompute_labels();
    Ok(out)
}

/// Random disjoint split of OOD rows between validation and test.
pub fn split_ood(
    mut ood: Vec<Utterance>,
    valid_fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    if !(0.0 < valid_fraction && valid_fraction < 1.0) {
        return Err(Error::Config(format!(
            "OOD valid fraction must be in (0, 1), got {valid_fraction}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    ood.shuffle(&mut rng);
    let n_valid = ((ood.len() as f64) * valid_fraction).round() as usize;
    let n_valid = n_valid.min(ood.len());
    let test = ood.split_off(n_valid);
    Ok((ood, test))
}

/// Write a split back to TSV as `label<TAB>text` with tokens space-joined
/// and OOD rows carrying the sentinel label.
pub fn write_split(path: &Path, rows: &[Utterance], ood_label: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for u in rows {
        let label = u.label.as_deref().unwrap_or(ood_label);
        buf.push_str(label);
        buf.push('\t');
        buf.push_str(&u.tokens.join(" "));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

//! Experiment orchestration: prepare → train → score → evaluate → report.
//!
//! A TOML config names the dataset, the detection methods, the model
//! sizes, and the seed list. Each seed gets its own artifact directory
//! (`out/<seed>/checkpoints/`, `out/<seed>/scores/`, `out/<seed>/metrics.json`),
//! and every stage can run standalone on the previous stage's files —
//! `run_experiment` simply chains them in memory. All randomness derives
//! from the seed plus fixed per-model tags, so a rerun reproduces every
//! artifact byte for byte, and so does retraining with the model cache
//! disabled.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand_chacha::{rand_core::SeedableRng, ChaCha12Rng};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    coarsen_labels, load_tsv, make_holdout_split, write_split, DatasetBundle, TsvSchema,
    Utterance, Vocabulary, DEFAULT_OOD_LABEL,
};
use crate::error::{Error, Result};
use crate::lof::{tune_contamination, NeighborIndex};
use crate::metrics::{
    auroc, aupr_id, aupr_ood, f1_at_threshold, fpr_at_tpr, EvalReport, SeedMetrics,
};
use crate::models::{
    apply_pretrained_embeddings, train_discriminative_classifier, train_generative_classifier,
    train_language_model, DiscConfig, DiscriminativeClassifier, EncodedRow, GenConfig,
    GenerativeClassifier, HeadMode, LanguageModel, LmConfig, TrainLog, TrainParams, TrainText,
};
use crate::neural::store::ParameterStore;
use crate::noising::{NoiseDistribution, NoiseKind};
use crate::scoring::{
    llr_gen_scores, llr_lm_scores, methods_present, read_scores, score_lof, score_msp,
    score_neg_kl, score_neg_loglik, scored_set, write_scores, Method, OodScore,
    MSP_HIGH_TEMPERATURE,
};
use crate::seeding;
use crate::synth::{emit_synthetic_benchmark, SynthConfig};

// Stream tags separating the random streams drawn from one seed.
const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_NOISE: u64 = 3;

/// Where the sentences come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Label/text TSV files, one row per utterance.
    Tsv {
        train: PathBuf,
        valid: PathBuf,
        test: PathBuf,
        /// Column layout, e.g. `label,text` or `_,label,text`.
        schema: String,
        #[serde(default = "default_ood_label")]
        ood_label: String,
    },
    /// The built-in disjoint-vocabulary benchmark.
    Synthetic {
        #[serde(flatten)]
        synth: SynthConfig,
    },
}

fn default_ood_label() -> String {
    DEFAULT_OOD_LABEL.to_string()
}

/// Use labels as given, or truncate hierarchical ones to their top level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Fine,
    Coarse,
}

/// Model sizes and optimization settings shared by every seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Tokens rarer than this in training map to the unknown id.
    pub min_freq: u64,
    /// Classifier word-embedding width.
    pub embed_dim: usize,
    /// Projection width between embeddings and the classifier LSTMs.
    pub proj_dim: usize,
    /// Classifier LSTM hidden width (features are twice this).
    pub hidden: usize,
    /// Label-embedding width of the generative classifier.
    pub label_dim: usize,
    /// Unconditional language model sizes.
    pub lm_embed_dim: usize,
    pub lm_hidden: usize,
    /// Background (noise-trained) language model sizes.
    pub back_embed_dim: usize,
    pub back_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Margin-head settings.
    pub lmcl_margin: f64,
    pub lmcl_scale: f64,
    /// Neighbor count for the outlier index.
    pub lof_k: usize,
    /// Optional word-vector file (`token v1 v2 …` per line) applied to the
    /// classifier embeddings after random init.
    pub pretrained_embeddings: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            min_freq: 1,
            embed_dim: 100,
            proj_dim: 300,
            hidden: 300,
            label_dim: 20,
            lm_embed_dim: 100,
            lm_hidden: 300,
            back_embed_dim: 100,
            back_hidden: 128,
            epochs: 10,
            batch_size: 32,
            lmcl_margin: 0.35,
            lmcl_scale: 30.0,
            lof_k: 20,
            pretrained_embeddings: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub label_mode: LabelMode,
    /// When set, synthesize OOD by holding out classes: keep a minimal
    /// random class subset covering at least this percent of training rows
    /// and relabel the rest OOD. Varies per seed.
    #[serde(default)]
    pub holdout_coverage: Option<f64>,
    pub methods: Vec<String>,
    #[serde(default)]
    pub model: ModelConfig,
    /// Word-substitution probability for background-model training.
    #[serde(default = "default_p_noise")]
    pub p_noise: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Reuse one trained model across the methods that share it. Disabling
    /// retrains per method and must not change any result.
    #[serde(default = "default_true")]
    pub cache_models: bool,
}

fn default_p_noise() -> f64 {
    0.5
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml_path(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Parse and order the method list; rejects unknown names before any
    /// training starts.
    pub fn parse_methods(&self) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            return Err(Error::Config("the method list is empty".into()));
        }
        let mut requested = Vec::new();
        for name in &self.methods {
            let method: Method = name.parse()?;
            if !requested.contains(&method) {
                requested.push(method);
            }
        }
        // Canonical reporting order, independent of config order.
        Ok(Method::ALL
            .into_iter()
            .filter(|m| requested.contains(m))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.parse_methods()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("the seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("the seed list repeats a seed".into()));
        }
        if !(0.0 < self.p_noise && self.p_noise <= 1.0) {
            return Err(Error::Config(format!(
                "p_noise must be in (0, 1], got {}",
                self.p_noise
            )));
        }
        if let Some(coverage) = self.holdout_coverage {
            if !(0.0 < coverage && coverage < 100.0) {
                return Err(Error::Config(format!(
                    "holdout coverage must be a percent in (0, 100), got {coverage}"
                )));
            }
        }
        if self.model.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.model.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.model.lof_k == 0 {
            return Err(Error::Config("lof_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Artifact locations for one seed.
#[derive(Debug, Clone)]
pub struct SeedPaths {
    pub root: PathBuf,
    pub prepared: PathBuf,
    pub checkpoints: PathBuf,
    pub scores: PathBuf,
}

impl SeedPaths {
    pub fn new(out_dir: &Path, seed: u64) -> SeedPaths {
        let root = out_dir.join(seed.to_string());
        SeedPaths {
            prepared: root.join("prepared"),
            checkpoints: root.join("checkpoints"),
            scores: root.join("scores"),
            root,
        }
    }

    pub fn checkpoint(&self, key: ModelKey) -> PathBuf {
        self.checkpoints.join(key.name())
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    fn ensure(dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}

/// One encoded split with the bookkeeping scoring needs.
#[derive(Debug, Clone)]
pub struct SplitRows {
    pub ids: Vec<u64>,
    pub rows: Vec<EncodedRow>,
    pub is_ood: Vec<bool>,
}

impl SplitRows {
    /// The labeled in-domain rows, for classifier checkpoint selection and
    /// clean-perplexity validation.
    pub fn id_only(&self) -> Vec<EncodedRow> {
        self.rows
            .iter()
            .zip(&self.is_ood)
            .filter(|(_, ood)| !**ood)
            .map(|(r, _)| r.clone())
            .collect()
    }
}

/// Everything one seed's models read: the resolved splits, the vocabulary,
/// and encoded rows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub bundle: DatasetBundle,
    pub vocab: Vocabulary,
    pub train: SplitRows,
    pub valid: SplitRows,
    pub test: SplitRows,
}

/// Load the dataset named by the config, before any per-seed processing.
pub fn load_dataset(config: &ExperimentConfig) -> Result<DatasetBundle> {
    match &config.data {
        DataSource::Synthetic { synth } => emit_synthetic_benchmark(synth),
        DataSource::Tsv {
            train,
            valid,
            test,
            schema,
            ood_label,
        } => {
            let schema = TsvSchema::parse(schema)?;
            let mut next_id = 0;
            let bundle = DatasetBundle::assemble(
                load_tsv(train, &schema, ood_label, &mut next_id)?,
                load_tsv(valid, &schema, ood_label, &mut next_id)?,
                load_tsv(test, &schema, ood_label, &mut next_id)?,
            )?;
            bundle.validate()?;
            Ok(bundle)
        }
    }
}

/// Apply label coarsening and per-seed holdout, build the vocabulary from
/// the resulting training split, and encode every row. Rows are renumbered
/// to their line positions in the resolved splits (train, then valid, then
/// test) so ids match a [`write_prepared`]/[`load_prepared`] round trip.
pub fn prepare_seed(
    config: &ExperimentConfig,
    base: &DatasetBundle,
    seed: u64,
) -> Result<Prepared> {
    let mut bundle = base.clone();
    if config.label_mode == LabelMode::Coarse {
        bundle = coarsen_labels(&bundle, '/')?;
    }
    if let Some(coverage) = config.holdout_coverage {
        bundle = make_holdout_split(&bundle, coverage, seed)?;
    }
    let mut next_id = 0;
    for rows in [&mut bundle.train_id, &mut bundle.valid, &mut bundle.test] {
        for u in rows {
            u.id = next_id;
            next_id += 1;
        }
    }
    let vocab = Vocabulary::build(&bundle.train_id, config.model.min_freq)?;
    let encode = |rows: &[Utterance]| -> Result<SplitRows> {
        let mut out = SplitRows {
            ids: Vec::with_capacity(rows.len()),
            rows: Vec::with_capacity(rows.len()),
            is_ood: Vec::with_capacity(rows.len()),
        };
        for u in rows {
            let label = match &u.label {
                Some(l) => Some(bundle.label_id(l).ok_or_else(|| {
                    Error::Data(format!("utterance {} label '{l}' not in the label set", u.id))
                })?),
                None => None,
            };
            out.ids.push(u.id);
            out.rows.push(EncodedRow::new(vocab.encode(&u.tokens), label));
            out.is_ood.push(u.is_ood);
        }
        Ok(out)
    };
    Ok(Prepared {
        train: encode(&bundle.train_id)?,
        valid: encode(&bundle.valid)?,
        test: encode(&bundle.test)?,
        vocab,
        bundle,
    })
}

/// Write the resolved splits and vocabulary so later stages can run
/// without the original dataset.
pub fn write_prepared(paths: &SeedPaths, prep: &Prepared) -> Result<()> {
    SeedPaths::ensure(&paths.prepared)?;
    write_split(&paths.prepared.join("train.tsv"), &prep.bundle.train_id, DEFAULT_OOD_LABEL)?;
    write_split(&paths.prepared.join("valid.tsv"), &prep.bundle.valid, DEFAULT_OOD_LABEL)?;
    write_split(&paths.prepared.join("test.tsv"), &prep.bundle.test, DEFAULT_OOD_LABEL)?;
    prep.vocab.save(&paths.prepared.join("vocab.json"))
}

/// Rebuild [`Prepared`] from a prepared directory. Row ids are their line
/// positions, and the saved vocabulary is reused as-is.
pub fn load_prepared(paths: &SeedPaths) -> Result<Prepared> {
    let schema = TsvSchema::parse("label,text")?;
    let mut next_id = 0;
    let bundle = DatasetBundle::assemble(
        load_tsv(&paths.prepared.join("train.tsv"), &schema, DEFAULT_OOD_LABEL, &mut next_id)?,
        load_tsv(&paths.prepared.join("valid.tsv"), &schema, DEFAULT_OOD_LABEL, &mut next_id)?,
        load_tsv(&paths.prepared.join("test.tsv"), &schema, DEFAULT_OOD_LABEL, &mut next_id)?,
    )?;
    bundle.validate()?;
    let vocab = Vocabulary::load(&paths.prepared.join("vocab.json"))?;
    let encode = |rows: &[Utterance]| -> Result<SplitRows> {
        let mut out = SplitRows {
            ids: Vec::new(),
            rows: Vec::new(),
            is_ood: Vec::new(),
        };
        for u in rows {
            let label = match &u.label {
                Some(l) => Some(bundle.label_id(l).ok_or_else(|| {
                    Error::Data(format!("utterance {} label '{l}' not in the label set", u.id))
                })?),
                None => None,
            };
            out.ids.push(u.id);
            out.rows.push(EncodedRow::new(vocab.encode(&u.tokens), label));
            out.is_ood.push(u.is_ood);
        }
        Ok(out)
    };
    Ok(Prepared {
        train: encode(&bundle.train_id)?,
        valid: encode(&bundle.valid)?,
        test: encode(&bundle.test)?,
        vocab,
        bundle,
    })
}

/// The distinct trainable models; methods map onto these many-to-one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKey {
    DiscSoftmax,
    DiscLmcl,
    MainLm,
    Gen,
    Back(NoiseKind),
}

impl ModelKey {
    pub const ALL: [ModelKey; 7] = [
        ModelKey::DiscSoftmax,
        ModelKey::DiscLmcl,
        ModelKey::MainLm,
        ModelKey::Gen,
        ModelKey::Back(NoiseKind::Uniform),
        ModelKey::Back(NoiseKind::Unigram),
        ModelKey::Back(NoiseKind::Uniroot),
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKey::DiscSoftmax => "disc_softmax",
            ModelKey::DiscLmcl => "disc_lmcl",
            ModelKey::MainLm => "lm_main",
            ModelKey::Gen => "gen",
            ModelKey::Back(NoiseKind::Uniform) => "back_uniform",
            ModelKey::Back(NoiseKind::Unigram) => "back_unigram",
            ModelKey::Back(NoiseKind::Uniroot) => "back_uniroot",
        }
    }

    /// Tag separating this model's random streams from its siblings'.
    fn tag(self) -> u64 {
        match self {
            ModelKey::DiscSoftmax => 10,
            ModelKey::DiscLmcl => 11,
            ModelKey::MainLm => 12,
            ModelKey::Gen => 13,
            ModelKey::Back(NoiseKind::Uniform) => 20,
            ModelKey::Back(NoiseKind::Unigram) => 21,
            ModelKey::Back(NoiseKind::Uniroot) => 22,
        }
    }
}

/// The models a method list needs, in training order.
pub fn keys_for(methods: &[Method]) -> Vec<ModelKey> {
    let needs = |key: ModelKey| {
        methods.iter().any(|m| match key {
            ModelKey::DiscSoftmax => matches!(
                m,
                Method::Msp | Method::MspT1e3 | Method::NegKlU | Method::NegKlR | Method::Lof
            ),
            ModelKey::DiscLmcl => *m == Method::LofLmcl,
            ModelKey::MainLm => matches!(m, Method::LSimple | Method::LSimpleBacklm(_)),
            ModelKey::Gen => matches!(m, Method::LGen | Method::LGenBacklm(_)),
            ModelKey::Back(kind) => m.background() == Some(kind),
        })
    };
    ModelKey::ALL.into_iter().filter(|k| needs(*k)).collect()
}

/// A trained model plus its parameters, shared across the methods that
/// read it.
pub enum TrainedModel {
    Disc(ParameterStore, DiscriminativeClassifier),
    Lm(ParameterStore, LanguageModel),
    Gen(ParameterStore, GenerativeClassifier),
}

/// Whether models are trained in this process or read back from a prior
/// `train` stage's checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSource {
    TrainNow,
    FromCheckpoints,
}

/// Lazily trains (or loads) models and outlier indices on demand. With
/// caching on, each model is produced once per seed no matter how many
/// methods read it; with caching off it is reproduced per request, which
/// yields bit-identical results because every random stream depends only
/// on (seed, model).
pub struct Trainer<'a> {
    config: &'a ExperimentConfig,
    prep: &'a Prepared,
    seed: u64,
    paths: SeedPaths,
    source: ModelSource,
    models: HashMap<ModelKey, Rc<TrainedModel>>,
    indices: HashMap<ModelKey, Rc<NeighborIndex>>,
    /// Best-epoch logs for models trained by this instance.
    pub train_logs: BTreeMap<String, TrainLog>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: &'a ExperimentConfig,
        prep: &'a Prepared,
        seed: u64,
        source: ModelSource,
    ) -> Trainer<'a> {
        Trainer {
            config,
            prep,
            seed,
            paths: SeedPaths::new(&config.out_dir, seed),
            source,
            models: HashMap::new(),
            indices: HashMap::new(),
            train_logs: BTreeMap::new(),
        }
    }

    pub fn obtain(&mut self, key: ModelKey) -> Result<Rc<TrainedModel>> {
        if let Some(m) = self.models.get(&key) {
            return Ok(Rc::clone(m));
        }
        let model = Rc::new(match self.source {
            ModelSource::TrainNow => self.train_key(key)?,
            ModelSource::FromCheckpoints => self.load_key(key)?,
        });
        if self.config.cache_models {
            self.models.insert(key, Rc::clone(&model));
        }
        Ok(model)
    }

    fn train_key(&mut self, key: ModelKey) -> Result<TrainedModel> {
        let m = &self.config.model;
        let vocab_size = self.prep.vocab.len();
        let n_labels = self.prep.bundle.labels.len();
        let mut store = ParameterStore::new();
        let mut rng =
            ChaCha12Rng::seed_from_u64(seeding::mix(self.seed, &[key.tag(), TAG_INIT]));
        let params = TrainParams {
            epochs: m.epochs,
            batch_size: m.batch_size,
            shuffle_seed: seeding::mix(self.seed, &[key.tag(), TAG_SHUFFLE]),
            ..TrainParams::standard(m.epochs, 0)
        };
        let valid_id = self.prep.valid.id_only();
        log::info!("seed {}: training {}", self.seed, key.name());

        let (trained, meta) = match key {
            ModelKey::DiscSoftmax | ModelKey::DiscLmcl => {
                let head = match key {
                    ModelKey::DiscSoftmax => HeadMode::Softmax,
                    _ => HeadMode::Lmcl {
                        margin: m.lmcl_margin,
                        scale: m.lmcl_scale,
                    },
                };
                let config = DiscConfig {
                    vocab_size,
                    n_labels,
                    embed_dim: m.embed_dim,
                    proj_dim: m.proj_dim,
                    hidden: m.hidden,
                    head,
                };
                let model = DiscriminativeClassifier::new(&mut store, &config, &mut rng)?;
                self.apply_pretrained(&mut store, model.embedding_table())?;
                let log = train_discriminative_classifier(
                    &mut store,
                    &model,
                    &self.prep.train.rows,
                    &valid_id,
                    &params,
                )?;
                let meta = model.checkpoint_meta(self.seed, &log);
                self.train_logs.insert(key.name().into(), log);
                (TrainedModel::Disc(store, model), meta)
            }
            ModelKey::Gen => {
                let config = GenConfig {
                    vocab_size,
                    n_labels,
                    embed_dim: m.embed_dim,
                    label_dim: m.label_dim,
                    hidden: m.hidden,
                };
                let priors = self.prep.bundle.label_ratios();
                let model = GenerativeClassifier::new(&mut store, &config, &priors, &mut rng)?;
                self.apply_pretrained(&mut store, model.embedding_table())?;
                let log = train_generative_classifier(
                    &mut store,
                    &model,
                    &self.prep.train.rows,
                    &valid_id,
                    &params,
                )?;
                let meta = model.checkpoint_meta(self.seed, &log);
                self.train_logs.insert(key.name().into(), log);
                (TrainedModel::Gen(store, model), meta)
            }
            ModelKey::MainLm => {
                let config = LmConfig {
                    vocab_size,
                    embed_dim: m.lm_embed_dim,
                    hidden: m.lm_hidden,
                };
                let model = LanguageModel::new(&mut store, &config, &mut rng);
                let text = TrainText::Fixed(self.prep.train.rows.clone());
                let log = train_language_model(&mut store, &model, &text, &valid_id, &params)?;
                let meta = model.checkpoint_meta(self.seed, &log);
                self.train_logs.insert(key.name().into(), log);
                (TrainedModel::Lm(store, model), meta)
            }
            ModelKey::Back(kind) => {
                let config = LmConfig {
                    vocab_size,
                    embed_dim: m.back_embed_dim,
                    hidden: m.back_hidden,
                };
                let model = LanguageModel::new(&mut store, &config, &mut rng);
                let dist = NoiseDistribution::from_vocabulary(&self.prep.vocab, kind)?;
                let text = TrainText::NoisedPerEpoch {
                    base: &self.prep.bundle.train_id,
                    vocab: &self.prep.vocab,
                    dist: &dist,
                    p_noise: self.config.p_noise,
                    seed: seeding::mix(self.seed, &[key.tag(), TAG_NOISE]),
                };
                let log = train_language_model(&mut store, &model, &text, &valid_id, &params)?;
                let meta = model.checkpoint_meta(self.seed, &log);
                self.train_logs.insert(key.name().into(), log);
                (TrainedModel::Lm(store, model), meta)
            }
        };

        SeedPaths::ensure(&self.paths.checkpoints)?;
        let store = match &trained {
            TrainedModel::Disc(s, _) => s,
            TrainedModel::Lm(s, _) => s,
            TrainedModel::Gen(s, _) => s,
        };
        store.save(&self.paths.checkpoint(key), &meta)?;
        Ok(trained)
    }

    fn load_key(&self, key: ModelKey) -> Result<TrainedModel> {
        let prefix = self.paths.checkpoint(key);
        match key {
            ModelKey::DiscSoftmax | ModelKey::DiscLmcl => {
                let (store, model, _) = DiscriminativeClassifier::load(&prefix)?;
                let softmax = matches!(model.config.head, HeadMode::Softmax);
                if softmax != (key == ModelKey::DiscSoftmax) {
                    return Err(Error::Checkpoint(format!(
                        "{} holds the wrong classifier head",
                        prefix.display()
                    )));
                }
                Ok(TrainedModel::Disc(store, model))
            }
            ModelKey::MainLm | ModelKey::Back(_) => {
                let (store, model, _) = LanguageModel::load(&prefix)?;
                Ok(TrainedModel::Lm(store, model))
            }
            ModelKey::Gen => {
                let (store, model, _) = GenerativeClassifier::load(&prefix)?;
                Ok(TrainedModel::Gen(store, model))
            }
        }
    }

    fn apply_pretrained(&self, store: &mut ParameterStore, table: crate::neural::store::ParamId) -> Result<()> {
        if let Some(path) = &self.config.model.pretrained_embeddings {
            let matched = apply_pretrained_embeddings(store, table, &self.prep.vocab, path)?;
            log::info!(
                "seed {}: pretrained vectors covered {matched} of {} vocabulary entries",
                self.seed,
                self.prep.vocab.len()
            );
        }
        Ok(())
    }

    /// The outlier index over training features from the given classifier.
    fn obtain_index(&mut self, key: ModelKey) -> Result<Rc<NeighborIndex>> {
        if let Some(index) = self.indices.get(&key) {
            return Ok(Rc::clone(index));
        }
        let model = self.obtain(key)?;
        let TrainedModel::Disc(store, clf) = &*model else {
            return Err(Error::Config(format!(
                "outlier index requested over non-classifier model {}",
                key.name()
            )));
        };
        let features = clf.penultimate_features(store, &self.prep.train.rows);
        let index = Rc::new(NeighborIndex::build(features, self.config.model.lof_k)?);
        if self.config.cache_models {
            self.indices.insert(key, Rc::clone(&index));
        }
        Ok(index)
    }

    fn disc_posteriors(
        &mut self,
        split: &SplitRows,
        tau: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let model = self.obtain(ModelKey::DiscSoftmax)?;
        let TrainedModel::Disc(store, clf) = &*model else {
            unreachable!("DiscSoftmax key always yields a classifier");
        };
        clf.posteriors(store, &split.rows, tau)
    }

    /// η for one method over one split.
    pub fn method_scores(&mut self, method: Method, split: &SplitRows) -> Result<Vec<f64>> {
        match method {
            Method::Msp => Ok(self
                .disc_posteriors(split, 1.0)?
                .iter()
                .map(|p| score_msp(p))
                .collect()),
            Method::MspT1e3 => Ok(self
                .disc_posteriors(split, MSP_HIGH_TEMPERATURE)?
                .iter()
                .map(|p| score_msp(p))
                .collect()),
            Method::NegKlU => {
                let n = self.prep.bundle.labels.len();
                let uniform = vec![1.0 / n as f64; n];
                self.disc_posteriors(split, 1.0)?
                    .iter()
                    .map(|p| score_neg_kl(p, &uniform))
                    .collect()
            }
            Method::NegKlR => {
                let ratios = self.prep.bundle.label_ratios();
                self.disc_posteriors(split, 1.0)?
                    .iter()
                    .map(|p| score_neg_kl(p, &ratios))
                    .collect()
            }
            Method::Lof | Method::LofLmcl => {
                let key = if method == Method::Lof {
                    ModelKey::DiscSoftmax
                } else {
                    ModelKey::DiscLmcl
                };
                let index = self.obtain_index(key)?;
                let model = self.obtain(key)?;
                let TrainedModel::Disc(store, clf) = &*model else {
                    unreachable!("classifier keys always yield classifiers");
                };
                Ok(score_lof(store, clf, &index, &split.rows))
            }
            Method::LSimple => {
                let model = self.obtain(ModelKey::MainLm)?;
                let TrainedModel::Lm(store, lm) = &*model else {
                    unreachable!("MainLm key always yields a language model");
                };
                Ok(lm
                    .log_likelihoods(store, &split.rows)
                    .into_iter()
                    .map(score_neg_loglik)
                    .collect())
            }
            Method::LGen => {
                let model = self.obtain(ModelKey::Gen)?;
                let TrainedModel::Gen(store, gen) = &*model else {
                    unreachable!("Gen key always yields a generative classifier");
                };
                Ok(gen
                    .marginal_logliks(store, &split.rows)
                    .into_iter()
                    .map(score_neg_loglik)
                    .collect())
            }
            Method::LSimpleBacklm(kind) => {
                let main = self.obtain(ModelKey::MainLm)?;
                let back = self.obtain(ModelKey::Back(kind))?;
                let (TrainedModel::Lm(ms, main), TrainedModel::Lm(bs, back)) = (&*main, &*back)
                else {
                    unreachable!("language-model keys always yield language models");
                };
                llr_lm_scores(ms, main, bs, back, &split.rows)
            }
            Method::LGenBacklm(kind) => {
                let main = self.obtain(ModelKey::Gen)?;
                let back = self.obtain(ModelKey::Back(kind))?;
                let (TrainedModel::Gen(ms, main), TrainedModel::Lm(bs, back)) = (&*main, &*back)
                else {
                    unreachable!("generative and background keys are fixed kinds");
                };
                llr_gen_scores(ms, main, bs, back, &split.rows)
            }
        }
    }

    /// The LOF scores of the training points themselves — the reference
    /// distribution contamination tuning quantiles over.
    pub fn train_reference_scores(&mut self, method: Method) -> Result<Vec<f64>> {
        let key = match method {
            Method::Lof => ModelKey::DiscSoftmax,
            Method::LofLmcl => ModelKey::DiscLmcl,
            _ => {
                return Err(Error::Config(format!(
                    "method '{method}' has no training reference scores"
                )))
            }
        };
        Ok(self.obtain_index(key)?.train_scores().to_vec())
    }
}

/// All scores one seed produced, ready for evaluation or TSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedScores {
    /// Training-point reference scores (outlier methods only).
    pub train: Vec<OodScore>,
    pub valid: Vec<OodScore>,
    pub test: Vec<OodScore>,
}

/// Score every requested method on validation and test (plus training
/// references for the outlier methods) and write the score TSVs.
pub fn score_seed(
    trainer: &mut Trainer,
    prep: &Prepared,
    methods: &[Method],
    paths: &SeedPaths,
) -> Result<SeedScores> {
    let mut scores = SeedScores {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for &method in methods {
        for (split, out) in [(&prep.valid, &mut scores.valid), (&prep.test, &mut scores.test)] {
            let etas = trainer.method_scores(method, split)?;
            out.extend(
                etas.iter()
                    .zip(&split.ids)
                    .zip(&split.is_ood)
                    .map(|((&eta, &id), &ood)| OodScore::new(id, method, eta, ood)),
            );
        }
        if matches!(method, Method::Lof | Method::LofLmcl) {
            let reference = trainer.train_reference_scores(method)?;
            scores.train.extend(
                reference
                    .iter()
                    .zip(&prep.train.ids)
                    .map(|(&eta, &id)| OodScore::new(id, method, eta, false)),
            );
        }
    }
    SeedPaths::ensure(&paths.scores)?;
    write_scores(&paths.scores.join("valid.tsv"), &scores.valid)?;
    write_scores(&paths.scores.join("test.tsv"), &scores.test)?;
    if !scores.train.is_empty() {
        write_scores(&paths.scores.join("train.tsv"), &scores.train)?;
    }
    Ok(scores)
}

/// Per-method metrics for one seed: thresholds tuned on validation, all
/// metrics computed on test. Outlier methods pick their threshold by
/// contamination sweep over the training reference scores; every other
/// method uses the midpoint sweep.
pub fn evaluate_scores(scores: &SeedScores) -> Result<BTreeMap<String, SeedMetrics>> {
    let mut out = BTreeMap::new();
    for method in methods_present(&scores.valid) {
        let valid = scored_set(&scores.valid, method)?;
        let test = scored_set(&scores.test, method)?;
        let metrics = if matches!(method, Method::Lof | Method::LofLmcl) {
            let reference: Vec<f64> = scores
                .train
                .iter()
                .filter(|s| s.method == method)
                .map(|s| s.eta)
                .collect();
            if reference.is_empty() {
                return Err(Error::Data(format!(
                    "method '{method}' has no training reference scores for contamination tuning"
                )));
            }
            let (etas, flags): (Vec<f64>, Vec<bool>) = scores
                .valid
                .iter()
                .filter(|s| s.method == method)
                .map(|s| (s.eta, s.is_ood))
                .unzip();
            let choice = tune_contamination(&reference, &etas, &flags)?;
            // Duplicate-heavy reference sets can put the quantile at +∞; clamp
            // so the recorded threshold survives a JSON round trip.
            let threshold = choice.threshold.clamp(f64::MIN, f64::MAX);
            let f = f1_at_threshold(&test, threshold);
            SeedMetrics {
                threshold,
                fpr_at_95_tpr: fpr_at_tpr(&test, 0.95)?,
                auroc: auroc(&test)?,
                aupr_ood: aupr_ood(&test)?,
                aupr_id: aupr_id(&test)?,
                macro_f1: f.macro_f1,
                ood_f1: f.ood_f1,
                id_f1: f.id_f1,
            }
        } else {
            SeedMetrics::evaluate(&valid, &test)?
        };
        out.insert(method.name().to_string(), metrics);
    }
    Ok(out)
}

/// Read one seed's score TSVs back and evaluate them (the standalone
/// `eval` stage). Writes `metrics.json` next to the scores.
pub fn eval_stage(paths: &SeedPaths) -> Result<BTreeMap<String, SeedMetrics>> {
    let train_path = paths.scores.join("train.tsv");
    let scores = SeedScores {
        train: if train_path.exists() {
            read_scores(&train_path)?
        } else {
            Vec::new()
        },
        valid: read_scores(&paths.scores.join("valid.tsv"))?,
        test: read_scores(&paths.scores.join("test.tsv"))?,
    };
    let metrics = evaluate_scores(&scores)?;
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
    fs::write(paths.metrics(), json).map_err(|e| Error::io(&paths.metrics(), e))?;
    Ok(metrics)
}

/// The full experiment outcome: the aggregated evaluation plus which seeds
/// failed and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub completed_seeds: Vec<u64>,
    pub failed_seeds: BTreeMap<u64, String>,
    pub eval: EvalReport,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("report serialization: {e}")))
    }
}

/// Aggregate per-seed metric maps into the final report and write
/// `report.json` and `report.tsv` under the output directory.
pub fn assemble_report(
    config: &ExperimentConfig,
    per_seed: BTreeMap<u64, BTreeMap<String, SeedMetrics>>,
    failed_seeds: BTreeMap<u64, String>,
) -> Result<ExperimentReport> {
    if per_seed.is_empty() {
        let causes: Vec<String> = failed_seeds
            .iter()
            .map(|(s, e)| format!("seed {s}: {e}"))
            .collect();
        return Err(Error::Data(format!(
            "every seed failed — {}",
            causes.join("; ")
        )));
    }
    let completed: Vec<u64> = per_seed.keys().copied().collect();
    let mut per_method: BTreeMap<String, BTreeMap<u64, SeedMetrics>> = BTreeMap::new();
    for (&seed, methods) in &per_seed {
        for (name, metrics) in methods {
            per_method.entry(name.clone()).or_default().insert(seed, *metrics);
        }
    }
    let report = ExperimentReport {
        completed_seeds: completed.clone(),
        failed_seeds,
        eval: EvalReport::assemble(&completed, per_method)?,
    };
    SeedPaths::ensure(&config.out_dir)?;
    let json_path = config.out_dir.join("report.json");
    fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    let tsv_path = config.out_dir.join("report.tsv");
    fs::write(&tsv_path, report.eval.to_table_tsv()).map_err(|e| Error::io(&tsv_path, e))?;
    Ok(report)
}

/// Run one seed end to end in memory: prepare, train, score, evaluate.
pub fn run_seed(
    config: &ExperimentConfig,
    base: &DatasetBundle,
    methods: &[Method],
    seed: u64,
) -> Result<BTreeMap<String, SeedMetrics>> {
    let prep = prepare_seed(config, base, seed)?;
    let paths = SeedPaths::new(&config.out_dir, seed);
    write_prepared(&paths, &prep)?;
    let mut trainer = Trainer::new(config, &prep, seed, ModelSource::TrainNow);
    let scores = score_seed(&mut trainer, &prep, methods, &paths)?;
    let training_json = serde_json::to_string_pretty(&trainer.train_logs)
        .map_err(|e| Error::Data(format!("training log serialization: {e}")))?;
    let log_path = paths.root.join("training.json");
    fs::write(&log_path, training_json).map_err(|e| Error::io(&log_path, e))?;
    let metrics = evaluate_scores(&scores)?;
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
    fs::write(paths.metrics(), json).map_err(|e| Error::io(&paths.metrics(), e))?;
    Ok(metrics)
}

/// The whole experiment: every seed, every method, aggregated. A failing
/// seed is recorded and skipped; the report aggregates the seeds that
/// completed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let methods = config.parse_methods()?;
    let base = load_dataset(config)?;
    let mut per_seed = BTreeMap::new();
    let mut failed = BTreeMap::new();
    for &seed in &config.seeds {
        match run_seed(config, &base, &methods, seed) {
            Ok(metrics) => {
                per_seed.insert(seed, metrics);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failed.insert(seed, e.to_string());
            }
        }
    }
    assemble_report(config, per_seed, failed)
}

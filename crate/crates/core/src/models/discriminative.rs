//! Discriminative intent classifier: embedding → linear up-projection →
//! one bidirectional LSTM → final linear layer. The sentence representation
//! is the concatenation of the two directions' final hidden states; that
//! vector is also what outlier detection consumes. The head is either plain
//! softmax cross-entropy or the large-margin cosine loss.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::multiclass_macro_f1;
use crate::models::common::{
    bind_param, require_labels, run_lstm_with, score_chunks, train_loop, Better, EncodedRow,
    SequenceBatch, TrainLog, TrainParams, INIT_SCALE,
};
use crate::neural::{
    functions, tensor::dot, CheckpointMeta, Graph, LstmCell, NodeId, ParamId, ParameterStore,
};

pub const DISC_KIND: &str = "discriminative";

/// Loss/logit geometry of the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Plain affine logits trained with softmax cross-entropy.
    Softmax,
    /// Cosine logits: both the sentence feature and each class row are
    /// L2-normalized, the true class's cosine is reduced by `margin`
    /// (training only), and everything is multiplied by `scale`.
    Lmcl { margin: f64, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub vocab_size: usize,
    pub n_labels: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    /// Hidden size per direction; the sentence feature is twice this.
    pub hidden: usize,
    pub head: HeadMode,
}

#[derive(Debug, Clone)]
pub struct DiscriminativeClassifier {
    pub config: DiscConfig,
    emb: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
    fwd: LstmCell,
    bwd: LstmCell,
    w_out: ParamId,
    /// Bias exists only for the softmax head; cosine logits have none.
    b_out: Option<ParamId>,
}

impl DiscriminativeClassifier {
    pub fn new(
        store: &mut ParameterStore,
        config: &DiscConfig,
        rng: &mut impl Rng,
    ) -> Result<DiscriminativeClassifier> {
        if let HeadMode::Lmcl { margin, scale } = config.head {
            if margin < 0.0 || !margin.is_finite() {
                return Err(Error::Config(format!("margin must be ≥ 0, got {margin}")));
            }
            if scale <= 0.0 || !scale.is_finite() {
                return Err(Error::Config(format!("scale must be positive, got {scale}")));
            }
        }
        let emb = store.add_uniform(
            "disc.emb",
            config.vocab_size,
            config.embed_dim,
            INIT_SCALE,
            rng,
        );
        let w_proj = store.add_uniform(
            "disc.w_proj",
            config.proj_dim,
            config.embed_dim,
            INIT_SCALE,
            rng,
        );
        let b_proj = store.add_zeros("disc.b_proj", 1, config.proj_dim);
        let fwd = LstmCell::new(store, "disc.fwd", config.proj_dim, config.hidden, INIT_SCALE, rng);
        let bwd = LstmCell::new(store, "disc.bwd", config.proj_dim, config.hidden, INIT_SCALE, rng);
        let w_out = store.add_uniform(
            "disc.w_out",
            config.n_labels,
            2 * config.hidden,
            INIT_SCALE,
            rng,
        );
        let b_out = match config.head {
            HeadMode::Softmax => Some(store.add_zeros("disc.b_out", 1, config.n_labels)),
            HeadMode::Lmcl { .. } => None,
        };
        Ok(DiscriminativeClassifier {
            config: config.clone(),
            emb,
            w_proj,
            b_proj,
            fwd,
            bwd,
            w_out,
            b_out,
        })
    }

    pub fn from_store(
        store: &ParameterStore,
        config: &DiscConfig,
    ) -> Result<DiscriminativeClassifier> {
        let b_out = match config.head {
            HeadMode::Softmax => Some(bind_param(store, "disc.b_out", (1, config.n_labels))?),
            HeadMode::Lmcl { .. } => None,
        };
        Ok(DiscriminativeClassifier {
            config: config.clone(),
            emb: bind_param(store, "disc.emb", (config.vocab_size, config.embed_dim))?,
            w_proj: bind_param(store, "disc.w_proj", (config.proj_dim, config.embed_dim))?,
            b_proj: bind_param(store, "disc.b_proj", (1, config.proj_dim))?,
            fwd: LstmCell::from_store(store, "disc.fwd", config.proj_dim, config.hidden)?,
            bwd: LstmCell::from_store(store, "disc.bwd", config.proj_dim, config.hidden)?,
            w_out: bind_param(store, "disc.w_out", (config.n_labels, 2 * config.hidden))?,
            b_out,
        })
    }

    pub fn load(
        prefix: &Path,
    ) -> Result<(ParameterStore, DiscriminativeClassifier, CheckpointMeta)> {
        let (store, meta) = ParameterStore::load(prefix)?;
        if meta.model_kind != DISC_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a '{DISC_KIND}' checkpoint, found '{}'",
                meta.model_kind
            )));
        }
        let config: DiscConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("unreadable model config: {e}")))?;
        let model = DiscriminativeClassifier::from_store(&store, &config)?;
        Ok((store, model, meta))
    }

    pub fn checkpoint_meta(&self, seed: u64, log: &TrainLog) -> CheckpointMeta {
        CheckpointMeta {
            model_kind: DISC_KIND.into(),
            seed,
            epoch: log.best_epoch,
            selection_metric: "valid_macro_f1".into(),
            metric_value: log.best_metric,
            config: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }

    /// The word-embedding table, for pretrained-vector initialization.
    pub fn embedding_table(&self) -> ParamId {
        self.emb
    }

    /// Sentence representation node, B×2H: forward and backward final
    /// states side by side.
    fn feature_node(&self, g: &mut Graph, batch: &SequenceBatch) -> NodeId {
        let emb = g.param(self.emb);
        let w_proj = g.param(self.w_proj);
        let b_proj = g.param(self.b_proj);
        let project = |g: &mut Graph, ids: &[usize]| {
            let x = g.gather_rows(emb, ids);
            let z = g.matmul_nt(x, w_proj);
            g.add_bias(z, b_proj)
        };
        let fwd = run_lstm_with(g, &self.fwd, batch, batch.max_len, |g, t| {
            project(g, batch.input_ids(t))
        });
        let reversed = batch.reversed();
        let bwd = run_lstm_with(g, &self.bwd, &reversed, reversed.max_len, |g, t| {
            project(g, reversed.input_ids(t))
        });
        g.concat_cols(fwd.final_h, bwd.final_h)
    }

    /// Mean cross-entropy per sentence under the configured head.
    pub fn training_loss(&self, g: &mut Graph, rows: &[EncodedRow]) -> Result<NodeId> {
        let labels = require_labels(rows, self.config.n_labels)?;
        let targets: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
        let batch = SequenceBatch::from_rows(rows);
        let feat = self.feature_node(g, &batch);
        let ce = match self.config.head {
            HeadMode::Softmax => {
                let w = g.param(self.w_out);
                let z = g.matmul_nt(feat, w);
                let b = g.param(self.b_out.expect("softmax head has a bias"));
                let logits = g.add_bias(z, b);
                g.step_cross_entropy(logits, targets)
            }
            HeadMode::Lmcl { margin, scale } => {
                let w = g.param(self.w_out);
                let nf = g.normalize_rows(feat)?;
                let nw = g.normalize_rows(w)?;
                let cos = g.matmul_nt(nf, nw);
                let margined = g.sub_at_columns(cos, targets.clone(), margin);
                let scaled = g.scale(margined, scale);
                g.step_cross_entropy(scaled, targets)
            }
        };
        let total = g.sum_all(ce);
        Ok(g.scale(total, 1.0 / rows.len() as f64))
    }

    /// The features outlier detection runs on, one row per sentence.
    pub fn penultimate_features(&self, store: &ParameterStore, rows: &[EncodedRow]) -> Vec<Vec<f64>> {
        score_chunks(rows, |chunk| {
            let batch = SequenceBatch::from_rows(chunk);
            let mut g = Graph::new(store);
            let feat = self.feature_node(&mut g, &batch);
            let v = g.value(feat);
            (0..v.rows()).map(|r| v.row(r).to_vec()).collect()
        })
    }

    /// Inference-time final-layer logits (no margin for the cosine head).
    pub fn logits(&self, store: &ParameterStore, rows: &[EncodedRow]) -> Result<Vec<Vec<f64>>> {
        let feats = self.penultimate_features(store, rows);
        let w = store.get(self.w_out);
        match self.config.head {
            HeadMode::Softmax => {
                let b = store.get(self.b_out.expect("softmax head has a bias"));
                Ok(feats
                    .iter()
                    .map(|f| {
                        (0..self.config.n_labels)
                            .map(|y| dot(f, w.row(y)) + b.row(0)[y])
                            .collect()
                    })
                    .collect())
            }
            HeadMode::Lmcl { scale, .. } => {
                let w_normed: Vec<Vec<f64>> = (0..self.config.n_labels)
                    .map(|y| {
                        let row = w.row(y);
                        let norm = dot(row, row).sqrt();
                        if norm == 0.0 {
                            return Err(Error::Numeric(format!(
                                "class {y} has a zero-norm weight row"
                            )));
                        }
                        Ok(row.iter().map(|v| v / norm).collect())
                    })
                    .collect::<Result<_>>()?;
                feats
                    .iter()
                    .enumerate()
                    .map(|(r, f)| {
                        let norm = dot(f, f).sqrt();
                        if norm == 0.0 {
                            return Err(Error::Numeric(format!(
                                "row {r} has a zero-norm sentence feature"
                            )));
                        }
                        Ok(w_normed
                            .iter()
                            .map(|wy| scale * dot(f, wy) / norm)
                            .collect())
                    })
                    .collect()
            }
        }
    }

    /// Temperature-scaled softmax over the final-layer logits.
    pub fn posteriors(
        &self,
        store: &ParameterStore,
        rows: &[EncodedRow],
        tau: f64,
    ) -> Result<Vec<Vec<f64>>> {
        self.logits(store, rows)?
            .iter()
            .map(|z| functions::softmax_with_temperature(z, tau))
            .collect()
    }

    /// argmax over logits; exact ties keep the smallest label index.
    pub fn predict(&self, store: &ParameterStore, rows: &[EncodedRow]) -> Result<Vec<usize>> {
        Ok(self
            .logits(store, rows)?
            .iter()
            .map(|z| {
                let mut best = 0;
                for (y, v) in z.iter().enumerate().skip(1) {
                    if *v > z[best] {
                        best = y;
                    }
                }
                best
            })
            .collect())
    }
}

/// Train under the configured head; keep the epoch with the highest
/// macro-F1 of `predict` on the labeled validation rows.
pub fn train_discriminative_classifier(
    store: &mut ParameterStore,
    model: &DiscriminativeClassifier,
    train_rows: &[EncodedRow],
    valid_rows: &[EncodedRow],
    params: &TrainParams,
) -> Result<TrainLog> {
    let gold: Vec<usize> =
        require_labels(valid_rows, model.config.n_labels).map_err(|_| {
            Error::Data("validation rows for checkpoint selection must be labeled".into())
        })?;
    train_loop(
        store,
        params,
        |_| Ok(train_rows.to_vec()),
        |g, batch| model.training_loss(g, batch),
        |s| {
            let pred = model.predict(s, valid_rows)?;
            multiclass_macro_f1(&pred, &gold, model.config.n_labels)
        },
        Better::Higher,
    )
}

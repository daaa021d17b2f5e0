//! Class-conditional language model ("generative classifier"): one shared
//! LSTM over words, with the label entering only at the output layer, where
//! its embedding is concatenated onto the hidden state. Because the
//! recurrence never sees the label, all classes' conditionals come from a
//! single pass per sentence.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::multiclass_macro_f1;
use crate::models::common::{
    bind_param, require_labels, run_lstm_over, score_chunks, train_loop, Better, EncodedRow,
    SequenceBatch, TrainLog, TrainParams, INIT_SCALE,
};
use crate::neural::{
    functions::log_sum_exp, CheckpointMeta, Graph, LstmCell, NodeId, ParamId, ParameterStore,
};

pub const GEN_KIND: &str = "generative";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub vocab_size: usize,
    pub n_labels: usize,
    pub embed_dim: usize,
    pub label_dim: usize,
    pub hidden: usize,
}

/// Estimates P(sentence | label) for each in-domain label, plus a fixed
/// label prior taken from training-set ratios. The prior lives in the
/// parameter store (as frozen log-probabilities) so checkpoints carry it.
#[derive(Debug, Clone)]
pub struct GenerativeClassifier {
    pub config: GenConfig,
    emb: ParamId,
    label_emb: ParamId,
    cell: LstmCell,
    w_out: ParamId,
    b_out: ParamId,
    log_prior: ParamId,
}

impl GenerativeClassifier {
    /// `priors` are the training label ratios; they must be positive and
    /// sum to one.
    pub fn new(
        store: &mut ParameterStore,
        config: &GenConfig,
        priors: &[f64],
        rng: &mut impl Rng,
    ) -> Result<GenerativeClassifier> {
        validate_priors(priors, config.n_labels)?;
        let emb = store.add_uniform(
            "gen.emb",
            config.vocab_size,
            config.embed_dim,
            INIT_SCALE,
            rng,
        );
        let label_emb = store.add_uniform(
            "gen.label_emb",
            config.n_labels,
            config.label_dim,
            INIT_SCALE,
            rng,
        );
        let cell = LstmCell::new(store, "gen.cell", config.embed_dim, config.hidden, INIT_SCALE, rng);
        let w_out = store.add_uniform(
            "gen.w_out",
            config.vocab_size,
            config.hidden + config.label_dim,
            INIT_SCALE,
            rng,
        );
        let b_out = store.add_zeros("gen.b_out", 1, config.vocab_size);
        let log_prior = store.add_zeros("gen.log_prior", 1, config.n_labels);
        for (slot, &p) in store
            .get_mut(log_prior)
            .row_mut(0)
            .iter_mut()
            .zip(priors)
        {
            *slot = p.ln();
        }
        Ok(GenerativeClassifier {
            config: config.clone(),
            emb,
            label_emb,
            cell,
            w_out,
            b_out,
            log_prior,
        })
    }

    pub fn from_store(store: &ParameterStore, config: &GenConfig) -> Result<GenerativeClassifier> {
        let model = GenerativeClassifier {
            config: config.clone(),
            emb: bind_param(store, "gen.emb", (config.vocab_size, config.embed_dim))?,
            label_emb: bind_param(store, "gen.label_emb", (config.n_labels, config.label_dim))?,
            cell: LstmCell::from_store(store, "gen.cell", config.embed_dim, config.hidden)?,
            w_out: bind_param(
                store,
                "gen.w_out",
                (config.vocab_size, config.hidden + config.label_dim),
            )?,
            b_out: bind_param(store, "gen.b_out", (1, config.vocab_size))?,
            log_prior: bind_param(store, "gen.log_prior", (1, config.n_labels))?,
        };
        let priors: Vec<f64> = model.log_priors(store).iter().map(|lp| lp.exp()).collect();
        validate_priors(&priors, config.n_labels)?;
        Ok(model)
    }

    /// The word-embedding parameter, for pretrained initialization.
    pub fn embedding_table(&self) -> ParamId {
        self.emb
    }

    pub fn load(prefix: &Path) -> Result<(ParameterStore, GenerativeClassifier, CheckpointMeta)> {
        let (store, meta) = ParameterStore::load(prefix)?;
        if meta.model_kind != GEN_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a '{GEN_KIND}' checkpoint, found '{}'",
                meta.model_kind
            )));
        }
        let config: GenConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("unreadable model config: {e}")))?;
        let model = GenerativeClassifier::from_store(&store, &config)?;
        Ok((store, model, meta))
    }

    pub fn checkpoint_meta(&self, seed: u64, log: &TrainLog) -> CheckpointMeta {
        CheckpointMeta {
            model_kind: GEN_KIND.into(),
            seed,
            epoch: log.best_epoch,
            selection_metric: "valid_macro_f1".into(),
            metric_value: log.best_metric,
            config: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }

    pub fn log_priors(&self, store: &ParameterStore) -> Vec<f64> {
        store.get(self.log_prior).row(0).to_vec()
    }

    /// Per-row conditional NLL, B×1, with each row conditioned on the label
    /// in `label_of_row` (already validated against `n_labels`).
    fn loss_rows_for_labels(
        &self,
        g: &mut Graph,
        batch: &SequenceBatch,
        states: &[NodeId],
        label_of_row: &[usize],
    ) -> NodeId {
        let lab_table = g.param(self.label_emb);
        let lab_rows = g.gather_rows(lab_table, label_of_row);
        let w_out = g.param(self.w_out);
        let b_out = g.param(self.b_out);
        let mut total: Option<NodeId> = None;
        for (t, &h) in states.iter().enumerate() {
            let feat = g.concat_cols(h, lab_rows);
            let z = g.matmul_nt(feat, w_out);
            let logits = g.add_bias(z, b_out);
            let ce = g.step_cross_entropy(logits, batch.lm_targets(t));
            total = Some(match total {
                Some(acc) => g.add(acc, ce),
                None => ce,
            });
        }
        total.expect("every batch has at least one transition")
    }

    /// Mean cross-entropy per predicted token, conditioned on true labels.
    pub fn training_loss(&self, g: &mut Graph, rows: &[EncodedRow]) -> Result<NodeId> {
        let labels = require_labels(rows, self.config.n_labels)?;
        let batch = SequenceBatch::from_rows(rows);
        let states = run_lstm_over(g, &self.cell, self.emb, &batch, batch.max_len - 1).states;
        let per_row = self.loss_rows_for_labels(g, &batch, &states, &labels);
        let total = g.sum_all(per_row);
        Ok(g.scale(total, 1.0 / batch.n_lm_targets() as f64))
    }

    /// log P(sentence | label) for every row × every label. One LSTM pass
    /// per chunk serves all labels, since only the output layer is
    /// label-dependent.
    pub fn conditional_logliks(&self, store: &ParameterStore, rows: &[EncodedRow]) -> Vec<Vec<f64>> {
        score_chunks(rows, |chunk| {
            let batch = SequenceBatch::from_rows(chunk);
            let mut g = Graph::new(store);
            let states = run_lstm_over(&mut g, &self.cell, self.emb, &batch, batch.max_len - 1).states;
            let mut out = vec![Vec::with_capacity(self.config.n_labels); chunk.len()];
            for y in 0..self.config.n_labels {
                let nll = self.loss_rows_for_labels(&mut g, &batch, &states, &vec![y; chunk.len()]);
                for (r, row_out) in out.iter_mut().enumerate() {
                    row_out.push(-g.value(nll).get(r, 0));
                }
            }
            out
        })
    }

    /// log P(sentence) = log Σ_y P(sentence|y)·P(y).
    pub fn marginal_logliks(&self, store: &ParameterStore, rows: &[EncodedRow]) -> Vec<f64> {
        let log_prior = self.log_priors(store);
        self.conditional_logliks(store, rows)
            .iter()
            .map(|cond| {
                let joint: Vec<f64> =
                    cond.iter().zip(&log_prior).map(|(c, lp)| c + lp).collect();
                log_sum_exp(&joint)
            })
            .collect()
    }

    /// argmax over labels of conditional + log-prior; exact ties keep the
    /// smallest label index.
    pub fn predict(&self, store: &ParameterStore, rows: &[EncodedRow]) -> Vec<usize> {
        let log_prior = self.log_priors(store);
        self.conditional_logliks(store, rows)
            .iter()
            .map(|cond| {
                let mut best = 0;
                let mut best_v = cond[0] + log_prior[0];
                for (y, (c, lp)) in cond.iter().zip(&log_prior).enumerate().skip(1) {
                    let v = c + lp;
                    if v > best_v {
                        best = y;
                        best_v = v;
                    }
                }
                best
            })
            .collect()
    }
}

fn validate_priors(priors: &[f64], n_labels: usize) -> Result<()> {
    if priors.len() != n_labels {
        return Err(Error::Config(format!(
            "{} priors for {} labels",
            priors.len(),
            n_labels
        )));
    }
    if priors.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(Error::Config("label priors must be positive".into()));
    }
    let sum: f64 = priors.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("label priors sum to {sum}, not 1")));
    }
    Ok(())
}

/// Train on true-label conditionals; keep the epoch with the highest
/// macro-F1 of `predict` on the labeled validation rows.
pub fn train_generative_classifier(
    store: &mut ParameterStore,
    model: &GenerativeClassifier,
    train_rows: &[EncodedRow],
    valid_rows: &[EncodedRow],
    params: &TrainParams,
) -> Result<TrainLog> {
    let gold: Vec<usize> = require_labels(valid_rows, model.config.n_labels).map_err(|_| {
        Error::Data("validation rows for checkpoint selection must be labeled".into())
    })?;
    train_loop(
        store,
        params,
        |_| Ok(train_rows.to_vec()),
        |g, batch| model.training_loss(g, batch),
        |s| {
            let pred = model.predict(s, valid_rows);
            multiclass_macro_f1(&pred, &gold, model.config.n_labels)
        },
        Better::Higher,
    )
}

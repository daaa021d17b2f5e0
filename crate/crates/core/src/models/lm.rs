//! Unconditional next-token language model. The same architecture serves
//! two roles: the in-domain likelihood scorer (larger hidden size) and the
//! background model trained on noised text (smaller hidden size).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::models::common::{
    bind_param, run_lstm_over, score_chunks, train_loop, Better, EncodedRow, SequenceBatch,
    TrainLog, TrainParams, INIT_SCALE,
};
use crate::neural::{
    functions, CheckpointMeta, Graph, LstmCell, NodeId, ParamId, ParameterStore,
};
use crate::noising::{noise_corpus, NoiseDistribution};

pub const LM_KIND: &str = "lm";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

/// Embedding → one unidirectional LSTM → projection to vocabulary logits.
/// Carries no label-dependent parameters, so it can be trained on any text,
/// labeled or not.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub config: LmConfig,
    emb: ParamId,
    cell: LstmCell,
    w_out: ParamId,
    b_out: ParamId,
}

impl LanguageModel {
    pub fn new(store: &mut ParameterStore, config: &LmConfig, rng: &mut impl Rng) -> LanguageModel {
        let emb = store.add_uniform(
            "lm.emb",
            config.vocab_size,
            config.embed_dim,
            INIT_SCALE,
            rng,
        );
        let cell = LstmCell::new(store, "lm.cell", config.embed_dim, config.hidden, INIT_SCALE, rng);
        let w_out = store.add_uniform("lm.w_out", config.vocab_size, config.hidden, INIT_SCALE, rng);
        let b_out = store.add_zeros("lm.b_out", 1, config.vocab_size);
        LanguageModel {
            config: config.clone(),
            emb,
            cell,
            w_out,
            b_out,
        }
    }

    /// Rebind to parameters already in `store` (a loaded checkpoint).
    pub fn from_store(store: &ParameterStore, config: &LmConfig) -> Result<LanguageModel> {
        Ok(LanguageModel {
            config: config.clone(),
            emb: bind_param(store, "lm.emb", (config.vocab_size, config.embed_dim))?,
            cell: LstmCell::from_store(store, "lm.cell", config.embed_dim, config.hidden)?,
            w_out: bind_param(store, "lm.w_out", (config.vocab_size, config.hidden))?,
            b_out: bind_param(store, "lm.b_out", (1, config.vocab_size))?,
        })
    }

    /// Read a checkpoint written with [`checkpoint_meta`](Self::checkpoint_meta).
    pub fn load(prefix: &Path) -> Result<(ParameterStore, LanguageModel, CheckpointMeta)> {
        let (store, meta) = ParameterStore::load(prefix)?;
        if meta.model_kind != LM_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a '{LM_KIND}' checkpoint, found '{}'",
                meta.model_kind
            )));
        }
        let config: LmConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("unreadable model config: {e}")))?;
        let model = LanguageModel::from_store(&store, &config)?;
        Ok((store, model, meta))
    }

    pub fn checkpoint_meta(&self, seed: u64, log: &TrainLog) -> CheckpointMeta {
        CheckpointMeta {
            model_kind: LM_KIND.into(),
            seed,
            epoch: log.best_epoch,
            selection_metric: "valid_perplexity".into(),
            metric_value: log.best_metric,
            config: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }

    /// Per-row negative log-likelihood, B×1: the sum of next-token
    /// cross-entropy over every real transition including the one onto the
    /// end marker. Training and scoring both read this node, so the two
    /// paths cannot drift apart.
    pub fn loss_rows(&self, g: &mut Graph, batch: &SequenceBatch) -> NodeId {
        let run = run_lstm_over(g, &self.cell, self.emb, batch, batch.max_len - 1);
        let w_out = g.param(self.w_out);
        let b_out = g.param(self.b_out);
        let mut total: Option<NodeId> = None;
        for (t, &h) in run.states.iter().enumerate() {
            let z = g.matmul_nt(h, w_out);
            let logits = g.add_bias(z, b_out);
            let ce = g.step_cross_entropy(logits, batch.lm_targets(t));
            total = Some(match total {
                Some(acc) => g.add(acc, ce),
                None => ce,
            });
        }
        total.expect("every batch has at least one transition")
    }

    /// Mean cross-entropy per predicted token — the batch training scalar.
    pub fn training_loss(&self, g: &mut Graph, rows: &[EncodedRow]) -> NodeId {
        let batch = SequenceBatch::from_rows(rows);
        let per_row = self.loss_rows(g, &batch);
        let total = g.sum_all(per_row);
        g.scale(total, 1.0 / batch.n_lm_targets() as f64)
    }

    /// log P(sentence) for each row, natural log, no length normalization.
    pub fn log_likelihoods(&self, store: &ParameterStore, rows: &[EncodedRow]) -> Vec<f64> {
        score_chunks(rows, |chunk| {
            let batch = SequenceBatch::from_rows(chunk);
            let mut g = Graph::new(store);
            let loss = self.loss_rows(&mut g, &batch);
            g.value(loss).as_slice().iter().map(|&nll| -nll).collect()
        })
    }

    /// Corpus perplexity: exp of mean per-token cross-entropy.
    pub fn perplexity_on(&self, store: &ParameterStore, rows: &[EncodedRow]) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::Data("perplexity over an empty row set".into()));
        }
        let total_nll: f64 = self.log_likelihoods(store, rows).iter().map(|ll| -ll).sum();
        let n_targets: usize = rows.iter().map(|r| r.ids.len() - 1).sum();
        Ok(functions::perplexity(total_nll, n_targets))
    }
}

/// What a language model trains on.
pub enum TrainText<'a> {
    /// A fixed corpus, encoded once by the caller.
    Fixed(Vec<EncodedRow>),
    /// Freshly noised copies of `base`, resampled at the start of every
    /// epoch; validation still runs on clean text.
    NoisedPerEpoch {
        base: &'a [Utterance],
        vocab: &'a Vocabulary,
        dist: &'a NoiseDistribution,
        p_noise: f64,
        seed: u64,
    },
}

/// Train by next-token cross-entropy; the checkpoint with the lowest
/// validation perplexity wins. Leaves `store` at the winning epoch.
pub fn train_language_model(
    store: &mut ParameterStore,
    model: &LanguageModel,
    text: &TrainText,
    valid: &[EncodedRow],
    params: &TrainParams,
) -> Result<TrainLog> {
    train_loop(
        store,
        params,
        |epoch| match text {
            TrainText::Fixed(rows) => Ok(rows.clone()),
            TrainText::NoisedPerEpoch {
                base,
                vocab,
                dist,
                p_noise,
                seed,
            } => {
                let noised = noise_corpus(base, dist, *p_noise, *seed, epoch as u64)?;
                Ok(noised
                    .iter()
                    .map(|u| EncodedRow::new(vocab.encode(&u.tokens), None))
                    .collect())
            }
        },
        |g, batch| Ok(model.training_loss(g, batch)),
        |s| model.perplexity_on(s, valid),
        Better::Lower,
    )
}

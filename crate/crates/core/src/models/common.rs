//! Plumbing shared by every model family: padded batches, the step-wise
//! LSTM runner, and the epoch loop with checkpoint selection.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::neural::{
    lstm_step, AdamParams, Graph, LstmCell, NodeId, ParamId, ParameterStore, Tensor,
};
use crate::seeding;

/// Half-width of the uniform weight initialization every model uses.
pub const INIT_SCALE: f64 = 0.1;

/// Rows per graph when scoring a frozen model. Chunks are independent, so
/// this only trades graph size against scheduling overhead.
pub const SCORE_CHUNK: usize = 64;

/// One utterance ready for a model: encoded token ids (sentence-start
/// through sentence-end markers inclusive) plus an optional class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRow {
    pub ids: Vec<usize>,
    pub label: Option<usize>,
}

impl EncodedRow {
    pub fn new(ids: Vec<usize>, label: Option<usize>) -> EncodedRow {
        assert!(ids.len() >= 2, "an encoded row carries at least the sentence markers");
        EncodedRow { ids, label }
    }
}

/// A batch padded to its longest row and laid out by time step: column `t`
/// holds token `t` of every row, with padding past each row's true length.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub n_rows: usize,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<Option<usize>>,
    /// `step_ids[t]` is the t-th token of every row, `PAD_ID` past the end.
    step_ids: Vec<Vec<usize>>,
}

impl SequenceBatch {
    pub fn from_rows(rows: &[EncodedRow]) -> SequenceBatch {
        assert!(!rows.is_empty(), "a batch needs at least one row");
        let lengths: Vec<usize> = rows.iter().map(|r| r.ids.len()).collect();
        let max_len = *lengths.iter().max().expect("non-empty batch");
        let step_ids = (0..max_len)
            .map(|t| {
                rows.iter()
                    .map(|r| r.ids.get(t).copied().unwrap_or(PAD_ID))
                    .collect()
            })
            .collect();
        SequenceBatch {
            n_rows: rows.len(),
            max_len,
            lengths,
            labels: rows.iter().map(|r| r.label).collect(),
            step_ids,
        }
    }

    /// Token fed to the network at step `t`, one per row.
    pub fn input_ids(&self, t: usize) -> &[usize] {
        &self.step_ids[t]
    }

    /// Next-token targets for the step that consumed input `t`: the token
    /// at `t + 1` where one exists, `None` for rows already past their end.
    pub fn lm_targets(&self, t: usize) -> Vec<Option<usize>> {
        (0..self.n_rows)
            .map(|r| {
                if t + 1 < self.lengths[r] {
                    Some(self.step_ids[t + 1][r])
                } else {
                    None
                }
            })
            .collect()
    }

    /// 1.0 for rows that still have a real token at step `t`, else 0.0.
    pub fn mask(&self, t: usize) -> Vec<f64> {
        self.lengths
            .iter()
            .map(|&len| if t < len { 1.0 } else { 0.0 })
            .collect()
    }

    /// Number of next-token prediction targets in the whole batch: each row
    /// contributes one per transition, `len - 1`.
    pub fn n_lm_targets(&self) -> usize {
        self.lengths.iter().map(|len| len - 1).sum()
    }

    /// The same rows with token order flipped inside each row's true length,
    /// padding untouched. Feeding this to a forward pass yields the
    /// reverse-direction encoding used by the bidirectional classifier.
    pub fn reversed(&self) -> SequenceBatch {
        let mut flipped = self.clone();
        for r in 0..self.n_rows {
            let len = self.lengths[r];
            for t in 0..len {
                flipped.step_ids[t][r] = self.step_ids[len - 1 - t][r];
            }
        }
        flipped
    }
}

/// States produced by running one LSTM over a batch.
pub struct LstmRun {
    /// Hidden state after consuming input `t`, for each step run.
    pub states: Vec<NodeId>,
    /// Each row's state at its own last consumed step: once a row runs out
    /// of tokens its state is carried forward unchanged.
    pub final_h: NodeId,
}

/// Unroll `cell` over the first `steps` columns of `batch`, looking inputs
/// up in the `embedding` table. Rows shorter than `steps` freeze at their
/// final state via the step mask, so padding never leaks into results.
pub fn run_lstm_over(
    g: &mut Graph,
    cell: &LstmCell,
    embedding: ParamId,
    batch: &SequenceBatch,
    steps: usize,
) -> LstmRun {
    let emb = g.param(embedding);
    run_lstm_with(g, cell, batch, steps, |g, t| {
        g.gather_rows(emb, batch.input_ids(t))
    })
}

/// Like [`run_lstm_over`] but with a caller-built input at each step, for
/// models that transform tokens before the recurrence (e.g. a projection).
pub fn run_lstm_with<F>(
    g: &mut Graph,
    cell: &LstmCell,
    batch: &SequenceBatch,
    steps: usize,
    mut input_at: F,
) -> LstmRun
where
    F: FnMut(&mut Graph, usize) -> NodeId,
{
    assert!(steps >= 1 && steps <= batch.max_len, "steps outside batch length");
    let mut h = g.constant(Tensor::zeros(batch.n_rows, cell.hidden));
    let mut c = g.constant(Tensor::zeros(batch.n_rows, cell.hidden));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = input_at(g, t);
        let (h_new, c_new) = lstm_step(g, cell, x, h, c);
        let mask = batch.mask(t);
        if mask.iter().all(|&m| m == 1.0) {
            h = h_new;
            c = c_new;
        } else {
            let keep = g.constant(broadcast_mask(&mask, cell.hidden, false));
            let hold = g.constant(broadcast_mask(&mask, cell.hidden, true));
            let h_kept = g.mul(h_new, keep);
            let h_held = g.mul(h, hold);
            h = g.add(h_kept, h_held);
            let c_kept = g.mul(c_new, keep);
            let c_held = g.mul(c, hold);
            c = g.add(c_kept, c_held);
        }
        states.push(h);
    }
    LstmRun { states, final_h: h }
}

/// Map `score` over fixed-size chunks of rows, in parallel when enabled.
/// Per-row results never depend on chunk mates (padding is masked out), so
/// parallel and serial runs agree bit for bit.
pub fn score_chunks<T, F>(rows: &[EncodedRow], score: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[EncodedRow]) -> Vec<T> + Sync,
{
    if rows.is_empty() {
        return Vec::new();
    }
    #[cfg(feature = "parallel")]
    let out = rows.par_chunks(SCORE_CHUNK).flat_map_iter(&score).collect();
    #[cfg(not(feature = "parallel"))]
    let out = rows.chunks(SCORE_CHUNK).flat_map(&score).collect();
    out
}

/// Collect the label of every row, rejecting unlabeled rows and indices
/// outside the class set.
pub fn require_labels(rows: &[EncodedRow], n_labels: usize) -> Result<Vec<usize>> {
    rows.iter()
        .map(|r| match r.label {
            Some(y) if y < n_labels => Ok(y),
            Some(y) => Err(Error::Data(format!(
                "label index {y} outside the {n_labels} training classes"
            ))),
            None => Err(Error::Data(
                "this operation requires a label on every row".into(),
            )),
        })
        .collect()
}

/// Overwrite embedding rows from a pretrained-vector text file: each line
/// is a token followed by space-separated components. Rows for tokens the
/// vocabulary lacks are skipped; vocabulary tokens absent from the file
/// keep their random initialization. Returns how many rows were replaced.
pub fn apply_pretrained_embeddings(
    store: &mut ParameterStore,
    table: ParamId,
    vocab: &crate::corpus::Vocabulary,
    path: &std::path::Path,
) -> Result<usize> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dim = store.get(table).cols();
    let mut matched = 0;
    for (idx, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let Some(id) = vocab.id(token) else { continue };
        let components = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: format!("bad vector component '{p}'"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if components.len() != dim {
            return Err(Error::Data(format!(
                "pretrained vector for '{token}' has {} components, embedding width is {dim}",
                components.len()
            )));
        }
        store.get_mut(table).row_mut(id).copy_from_slice(&components);
        matched += 1;
    }
    Ok(matched)
}

/// Look up a parameter by name and insist on its shape; how models rebind
/// themselves to a freshly loaded checkpoint.
pub fn bind_param(
    store: &ParameterStore,
    name: &str,
    shape: (usize, usize),
) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
    let got = store.get(id).shape();
    if got != shape {
        return Err(Error::Checkpoint(format!(
            "parameter '{name}' has shape {got:?}, expected {shape:?}"
        )));
    }
    Ok(id)
}

/// Expand a per-row 0/1 mask to a full B×H tensor, optionally inverted.
fn broadcast_mask(mask: &[f64], hidden: usize, invert: bool) -> Tensor {
    let mut out = Tensor::zeros(mask.len(), hidden);
    for (r, &m) in mask.iter().enumerate() {
        let v = if invert { 1.0 - m } else { m };
        out.row_mut(r).fill(v);
    }
    out
}

/// Knobs of the epoch loop.
#[derive(Debug, Clone)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub clip_norm: f64,
    /// Base seed for the per-epoch shuffle order.
    pub shuffle_seed: u64,
}

impl TrainParams {
    /// The settings every model here trains with unless a test overrides
    /// them: batch 32, default adaptive-moment steps, gradient norm cap 5.
    pub fn standard(epochs: usize, shuffle_seed: u64) -> TrainParams {
        TrainParams {
            epochs,
            batch_size: 32,
            adam: AdamParams::default(),
            clip_norm: 5.0,
            shuffle_seed,
        }
    }
}

/// Which direction of a validation metric counts as an improvement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Lower,
    Higher,
}

impl Better {
    fn improves(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Better::Lower => candidate < incumbent,
            Better::Higher => candidate > incumbent,
        }
    }

    /// Checkpoint acceptance: equal metrics also replace the incumbent, so a
    /// run keeps the latest of the tied epochs. Classification F1 can plateau
    /// at its ceiling within an epoch or two on easy data while the underlying
    /// densities keep sharpening; among equally-scored checkpoints the most
    /// trained one has the best likelihoods.
    fn accepts(self, candidate: f64, incumbent: f64) -> bool {
        candidate == incumbent || self.improves(candidate, incumbent)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Run the generic epoch loop and leave `store` holding the values from the
/// best epoch by validation metric (latest epoch on exact ties).
///
/// Per epoch: fetch rows via `epoch_rows` (which may re-noise), shuffle them
/// with a stream derived from `(shuffle_seed, epoch)`, and for each batch
/// build the loss with `batch_loss`, backpropagate, clip the global gradient
/// norm, and apply one optimizer step. `validate` sees the store after the
/// epoch; a non-finite metric aborts with an error rather than silently
/// checkpointing a diverged model.
pub fn train_loop<E, B, V>(
    store: &mut ParameterStore,
    params: &TrainParams,
    mut epoch_rows: E,
    mut batch_loss: B,
    mut validate: V,
    better: Better,
) -> Result<TrainLog>
where
    E: FnMut(usize) -> Result<Vec<EncodedRow>>,
    B: FnMut(&mut Graph, &[EncodedRow]) -> Result<NodeId>,
    V: FnMut(&ParameterStore) -> Result<f64>,
{
    assert!(params.epochs >= 1, "training needs at least one epoch");
    assert!(params.batch_size >= 1, "batch size must be positive");
    let mut log = TrainLog {
        epochs: Vec::with_capacity(params.epochs),
        best_epoch: 0,
        best_metric: f64::NAN,
    };
    let mut best_snapshot: Option<Vec<Tensor>> = None;

    for epoch in 1..=params.epochs {
        let mut rows = epoch_rows(epoch)?;
        if rows.is_empty() {
            return Err(Error::Data("no training rows for this epoch".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seeding::mix(
            params.shuffle_seed,
            &[epoch as u64],
        ));
        rows.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in rows.chunks(params.batch_size) {
            let grads = {
                let mut g = Graph::new(store);
                let loss = batch_loss(&mut g, batch)?;
                let total = g.scalar(loss);
                if !total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training loss diverged at epoch {epoch}"
                    )));
                }
                epoch_loss += total;
                n_batches += 1;
                g.backward(loss)
            };
            let mut grads = grads;
            grads.clip_global_norm(params.clip_norm);
            store.adam_step(&grads, &params.adam)?;
        }

        let metric = validate(store)?;
        if !metric.is_finite() {
            return Err(Error::Numeric(format!(
                "validation metric diverged at epoch {epoch}"
            )));
        }
        let train_loss = epoch_loss / n_batches as f64;
        info!("epoch {epoch}/{}: train loss {train_loss:.4}, valid {metric:.4}", params.epochs);
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            metric,
        });
        if best_snapshot.is_none() || better.accepts(metric, log.best_metric) {
            log.best_epoch = epoch;
            log.best_metric = metric;
            best_snapshot = Some(store.clone_values());
        }
    }

    let snapshot = best_snapshot.expect("at least one epoch ran");
    store.restore_values(&snapshot);
    Ok(log)
}

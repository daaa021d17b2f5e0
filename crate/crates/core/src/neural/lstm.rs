//! One LSTM cell: parameter bundle plus the single-step graph builder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::graph::{Graph, NodeId};
use crate::neural::store::{ParamId, ParameterStore};

/// Parameters of one cell. Gate blocks are stacked in the order input,
/// forget, candidate, output along the 4H dimension.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    /// Input weights, 4H × E.
    pub w_x: ParamId,
    /// Recurrent weights, 4H × H.
    pub w_h: ParamId,
    /// Gate bias, 1 × 4H.
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Fresh cell with uniform(−scale, scale) weights, zero biases, and the
    /// forget-gate bias raised to 1 so early training favors remembering.
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> LstmCell {
        let w_x = store.add_uniform(&format!("{prefix}.w_x"), 4 * hidden, input, init_scale, rng);
        let w_h = store.add_uniform(&format!("{prefix}.w_h"), 4 * hidden, hidden, init_scale, rng);
        let bias = store.add_zeros(&format!("{prefix}.bias"), 1, 4 * hidden);
        for v in &mut store.get_mut(bias).row_mut(0)[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmCell {
            w_x,
            w_h,
            bias,
            input,
            hidden,
        }
    }

    /// Rebind a cell to parameters already present in a store (after
    /// loading a checkpoint), verifying their shapes.
    pub fn from_store(
        store: &ParameterStore,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<LstmCell> {
        let find = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
        };
        let cell = LstmCell {
            w_x: find("w_x")?,
            w_h: find("w_h")?,
            bias: find("bias")?,
            input,
            hidden,
        };
        let checks = [
            (cell.w_x, (4 * hidden, input)),
            (cell.w_h, (4 * hidden, hidden)),
            (cell.bias, (1, 4 * hidden)),
        ];
        for (id, want) in checks {
            let got = store.get(id).shape();
            if got != want {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {got:?}, expected {want:?}",
                    store.name(id)
                )));
            }
        }
        Ok(cell)
    }
}

/// One step over a batch: x is B×E, h_prev and c_prev are B×H. Returns
/// (h_t, c_t). Standard gating: sigmoid input/forget/output gates, tanh
/// candidate, c = f⊙c_prev + i⊙g, h = o⊙tanh(c).
pub fn lstm_step(
    g: &mut Graph,
    cell: &LstmCell,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> (NodeId, NodeId) {
    let batch = g.value(x).rows();
    assert_eq!(g.value(x).cols(), cell.input, "input width mismatch");
    assert_eq!(g.value(h_prev).shape(), (batch, cell.hidden), "h_prev shape mismatch");
    assert_eq!(g.value(c_prev).shape(), (batch, cell.hidden), "c_prev shape mismatch");

    let w_x = g.param(cell.w_x);
    let w_h = g.param(cell.w_h);
    let bias = g.param(cell.bias);
    let from_x = g.matmul_nt(x, w_x);
    let from_h = g.matmul_nt(h_prev, w_h);
    let pre = g.add(from_x, from_h);
    let gates = g.add_bias(pre, bias);

    let h = cell.hidden;
    let i_pre = g.slice_cols(gates, 0, h);
    let f_pre = g.slice_cols(gates, h, 2 * h);
    let g_pre = g.slice_cols(gates, 2 * h, 3 * h);
    let o_pre = g.slice_cols(gates, 3 * h, 4 * h);
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(g_pre);
    let o = g.sigmoid(o_pre);

    let keep = g.mul(f, c_prev);
    let write = g.mul(i, cand);
    let c_t = g.add(keep, write);
    let c_act = g.tanh(c_t);
    let h_t = g.mul(o, c_act);
    (h_t, c_t)
}

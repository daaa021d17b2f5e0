//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A `Graph` borrows a `ParameterStore`, evaluates eagerly as ops are
//! appended, and replays the tape backwards to accumulate parameter
//! gradients. The op set is exactly what the LSTM architectures need — no
//! general compiler. Shape errors are caller bugs and panic; data-dependent
//! failures (zero-norm rows) surface as `Result`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::neural::functions::log_sum_exp;
use crate::neural::store::{GradMap, ParamId, ParameterStore};
use crate::neural::tensor::{mm_nn, mm_nt, mm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Constant,
    Param(ParamId),
    /// Row lookup into `src` (an embedding table): out.row(b) = src.row(ids[b]).
    GatherRows { src: NodeId, ids: Vec<usize> },
    /// a · bᵀ.
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Matrix plus a 1×n bias broadcast over rows.
    AddBias { src: NodeId, bias: NodeId },
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SliceCols { src: NodeId, start: usize },
    ConcatCols(NodeId, NodeId),
    Scale { src: NodeId, k: f64 },
    /// L2-normalize each row.
    NormalizeRows { src: NodeId },
    /// Subtract a constant at one column per row; identity in backward.
    SubAtColumns { src: NodeId },
    /// Per-row −log softmax(logits)[target]; rows with no target emit 0.
    StepCrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
    },
    /// Sum of every entry, as a 1×1 tensor.
    SumAll(NodeId),
}

struct Node {
    op: Op,
    /// None only for Param nodes, whose values live in the store.
    value: Option<Tensor>,
}

pub struct Graph<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Graph<'s> {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].op {
            Op::Param(pid) => self.store.get(*pid),
            _ => self.nodes[id.0].value.as_ref().expect("non-param node has a value"),
        }
    }

    /// The single element of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, Some(t))
    }

    /// Parameter leaf; repeated calls for the same parameter share a node
    /// so gradients accumulate in one buffer.
    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&pid) {
            return id;
        }
        let id = self.push(Op::Param(pid), None);
        self.param_nodes.insert(pid, id);
        id
    }

    pub fn gather_rows(&mut self, src: NodeId, ids: &[usize]) -> NodeId {
        let table = self.value(src);
        assert!(!ids.is_empty(), "gather_rows needs at least one row");
        let mut out = Tensor::zeros(ids.len(), table.cols());
        for (b, &i) in ids.iter().enumerate() {
            assert!(i < table.rows(), "row {i} outside table with {} rows", table.rows());
            out.row_mut(b).copy_from_slice(table.row(i));
        }
        self.push(
            Op::GatherRows {
                src,
                ids: ids.to_vec(),
            },
            Some(out),
        )
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = mm_nt(self.value(a), self.value(b));
        self.push(Op::MatMulNT(a, b), Some(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(Op::Add(a, b), Some(out))
    }

    pub fn add_bias(&mut self, src: NodeId, bias: NodeId) -> NodeId {
        let (vs, vb) = (self.value(src), self.value(bias));
        assert_eq!(vb.rows(), 1, "bias must be a row vector");
        assert_eq!(vs.cols(), vb.cols(), "bias width mismatch");
        let mut out = vs.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.row(0)) {
                *o += b;
            }
        }
        self.push(Op::AddBias { src, bias }, Some(out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Mul(a, b), Some(out))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(stable_sigmoid);
        self.push(Op::Sigmoid(x), Some(out))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), Some(out))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(src);
        assert!(start < end && end <= v.cols(), "slice {start}..{end} of {} cols", v.cols());
        let mut out = Tensor::zeros(v.rows(), end - start);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        self.push(Op::SliceCols { src, start }, Some(out))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let mut out = Tensor::zeros(va.rows(), va.cols() + vb.cols());
        for r in 0..va.rows() {
            out.row_mut(r)[..va.cols()].copy_from_slice(va.row(r));
            out.row_mut(r)[va.cols()..].copy_from_slice(vb.row(r));
        }
        self.push(Op::ConcatCols(a, b), Some(out))
    }

    pub fn scale(&mut self, src: NodeId, k: f64) -> NodeId {
        let out = self.value(src).map(|v| k * v);
        self.push(Op::Scale { src, k }, Some(out))
    }

    /// L2-normalize each row; errors if any row has zero norm.
    pub fn normalize_rows(&mut self, src: NodeId) -> Result<NodeId> {
        let v = self.value(src);
        let mut out = v.clone();
        for r in 0..out.rows() {
            let norm = crate::neural::tensor::dot(v.row(r), v.row(r)).sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric(format!("row {r} has zero norm, cannot normalize")));
            }
            for o in out.row_mut(r) {
                *o /= norm;
            }
        }
        Ok(self.push(Op::NormalizeRows { src }, Some(out)))
    }

    pub fn sub_at_columns(
        &mut self,
        src: NodeId,
        cols: Vec<Option<usize>>,
        amount: f64,
    ) -> NodeId {
        let v = self.value(src);
        assert_eq!(cols.len(), v.rows(), "one column choice per row");
        let mut out = v.clone();
        for (r, c) in cols.iter().enumerate() {
            if let Some(c) = c {
                assert!(*c < v.cols(), "column {c} outside width {}", v.cols());
                out.row_mut(r)[*c] -= amount;
            }
        }
        self.push(Op::SubAtColumns { src }, Some(out))
    }

    /// Per-row cross-entropy against one target id per row; rows with None
    /// contribute exactly zero (padding). Output is B×1.
    pub fn step_cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> NodeId {
        let v = self.value(logits);
        assert_eq!(targets.len(), v.rows(), "one target per row");
        let mut out = Tensor::zeros(v.rows(), 1);
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                assert!(*t < v.cols(), "target {t} outside vocabulary of {}", v.cols());
                let row = v.row(r);
                out.set(r, 0, log_sum_exp(row) - row[*t]);
            }
        }
        self.push(Op::StepCrossEntropy { logits, targets }, Some(out))
    }

    pub fn sum_all(&mut self, src: NodeId) -> NodeId {
        let v = self.value(src);
        // Pairwise-free fixed order: plain left fold over the buffer.
        let s: f64 = v.as_slice().iter().sum();
        self.push(Op::SumAll(src), Some(Tensor::scalar(s)))
    }

    /// Accumulate dLoss/dParam for every parameter reachable from `loss`,
    /// which must be a 1×1 node.
    pub fn backward(&mut self, loss: NodeId) -> GradMap {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::scalar(1.0));
        let mut grads = GradMap::new(self.store.len());

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(pid) => grads.accumulate(*pid, &g),
                Op::GatherRows { src, ids } => {
                    let table_shape = self.value(*src).shape();
                    let acc = adjoint_slot(&mut adjoints, *src, table_shape);
                    for (b, &row) in ids.iter().enumerate() {
                        for (a, d) in acc.row_mut(row).iter_mut().zip(g.row(b)) {
                            *a += d;
                        }
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = mm_nn(&g, vb);
                    let gb = mm_tn(&g, va);
                    let (a, b) = (*a, *b);
                    adjoint_slot(&mut adjoints, a, ga.shape()).add_assign(&ga);
                    adjoint_slot(&mut adjoints, b, gb.shape()).add_assign(&gb);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    adjoint_slot(&mut adjoints, a, g.shape()).add_assign(&g);
                    adjoint_slot(&mut adjoints, b, g.shape()).add_assign(&g);
                }
                Op::AddBias { src, bias } => {
                    let (src, bias) = (*src, *bias);
                    adjoint_slot(&mut adjoints, src, g.shape()).add_assign(&g);
                    let acc = adjoint_slot(&mut adjoints, bias, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (a, d) in acc.row_mut(0).iter_mut().zip(g.row(r)) {
                            *a += d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (x, y) in ga.as_mut_slice().iter_mut().zip(self.value(*b).as_slice()) {
                        *x *= y;
                    }
                    let mut gb = g.clone();
                    for (x, y) in gb.as_mut_slice().iter_mut().zip(self.value(*a).as_slice()) {
                        *x *= y;
                    }
                    let (a, b) = (*a, *b);
                    adjoint_slot(&mut adjoints, a, ga.shape()).add_assign(&ga);
                    adjoint_slot(&mut adjoints, b, gb.shape()).add_assign(&gb);
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut gx = g.clone();
                    for (d, &yv) in gx.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *d *= yv * (1.0 - yv);
                    }
                    let x = *x;
                    adjoint_slot(&mut adjoints, x, gx.shape()).add_assign(&gx);
                }
                Op::Tanh(x) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut gx = g.clone();
                    for (d, &yv) in gx.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *d *= 1.0 - yv * yv;
                    }
                    let x = *x;
                    adjoint_slot(&mut adjoints, x, gx.shape()).add_assign(&gx);
                }
                Op::SliceCols { src, start } => {
                    let (src, start) = (*src, *start);
                    let src_shape = self.value(src).shape();
                    let acc = adjoint_slot(&mut adjoints, src, src_shape);
                    for r in 0..g.rows() {
                        for (c, d) in g.row(r).iter().enumerate() {
                            acc.row_mut(r)[start + c] += d;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let wa = self.value(a).cols();
                    let shape_a = self.value(a).shape();
                    let shape_b = self.value(b).shape();
                    {
                        let acc = adjoint_slot(&mut adjoints, a, shape_a);
                        for r in 0..g.rows() {
                            for (x, d) in acc.row_mut(r).iter_mut().zip(&g.row(r)[..wa]) {
                                *x += d;
                            }
                        }
                    }
                    let acc = adjoint_slot(&mut adjoints, b, shape_b);
                    for r in 0..g.rows() {
                        for (x, d) in acc.row_mut(r).iter_mut().zip(&g.row(r)[wa..]) {
                            *x += d;
                        }
                    }
                }
                Op::Scale { src, k } => {
                    let gx = g.map(|v| v * k);
                    let src = *src;
                    adjoint_slot(&mut adjoints, src, gx.shape()).add_assign(&gx);
                }
                Op::NormalizeRows { src } => {
                    // y = x/‖x‖ ⇒ dx = (dy − (dy·y)·y)/‖x‖.
                    let src = *src;
                    let x = self.value(src);
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut gx = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let norm = crate::neural::tensor::dot(x.row(r), x.row(r)).sqrt();
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let proj = crate::neural::tensor::dot(gy, yr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = (gy[c] - proj * yr[c]) / norm;
                        }
                    }
                    adjoint_slot(&mut adjoints, src, gx.shape()).add_assign(&gx);
                }
                Op::SubAtColumns { src } => {
                    let src = *src;
                    adjoint_slot(&mut adjoints, src, g.shape()).add_assign(&g);
                }
                Op::StepCrossEntropy { logits, targets } => {
                    // d/dz of (logsumexp(z) − z_t) is softmax(z) − onehot(t).
                    let logits = *logits;
                    let v = self.value(logits);
                    let mut gl = Tensor::zeros(v.rows(), v.cols());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let seed = g.get(r, 0);
                        if seed == 0.0 {
                            continue;
                        }
                        let row = v.row(r);
                        let lse = log_sum_exp(row);
                        for (c, o) in gl.row_mut(r).iter_mut().enumerate() {
                            let p = (row[c] - lse).exp();
                            *o = seed * (p - if c == *t { 1.0 } else { 0.0 });
                        }
                    }
                    adjoint_slot(&mut adjoints, logits, gl.shape()).add_assign(&gl);
                }
                Op::SumAll(src) => {
                    let src = *src;
                    let shape = self.value(src).shape();
                    let seed = g.item();
                    let acc = adjoint_slot(&mut adjoints, src, shape);
                    for v in acc.as_mut_slice() {
                        *v += seed;
                    }
                }
            }
        }
        grads
    }
}

/// The adjoint buffer for a node, created zeroed on first touch.
fn adjoint_slot(
    adjoints: &mut [Option<Tensor>],
    id: NodeId,
    shape: (usize, usize),
) -> &mut Tensor {
    adjoints[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn forward_values_are_correct() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        // a · identityᵀ = a.
        let prod = g.matmul_nt(a, b);
        assert_eq!(g.value(prod), g.value(a));

        let s = g.sigmoid(b);
        assert!((g.value(s).get(0, 0) - stable_sigmoid(1.0)).abs() < 1e-15);
        assert_eq!(g.value(s).get(0, 1), 0.5, "sigmoid(0) = 1/2");

        let total = g.sum_all(a);
        assert_eq!(g.scalar(total), 10.0);

        let sliced = g.slice_cols(a, 1, 2);
        assert_eq!(g.value(sliced).as_slice(), &[2.0, 4.0]);

        let cat = g.concat_cols(a, b);
        assert_eq!(cat_row(g.value(cat), 0), vec![1.0, 2.0, 1.0, 0.0]);
    }

    fn cat_row(t: &Tensor, r: usize) -> Vec<f64> {
        t.row(r).to_vec()
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_vocab() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let logits = g.constant(Tensor::zeros(3, 7));
        let losses = g.step_cross_entropy(logits, vec![Some(0), Some(6), None]);
        let v = g.value(losses);
        assert!((v.get(0, 0) - (7.0f64).ln()).abs() < 1e-12);
        assert!((v.get(1, 0) - (7.0f64).ln()).abs() < 1e-12);
        assert_eq!(v.get(2, 0), 0.0, "padded row contributes nothing");
    }

    #[test]
    fn padded_rows_receive_no_gradient() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::filled(2, 3, 0.3));
        let mut g = Graph::new(&store);
        let wn = g.param(w);
        let loss_rows = g.step_cross_entropy(wn, vec![Some(1), None]);
        let loss = g.sum_all(loss_rows);
        let grads = g.backward(loss);
        let gw = grads.get(w).unwrap();
        assert!(gw.row(0).iter().any(|&v| v != 0.0));
        assert!(gw.row(1).iter().all(|&v| v == 0.0), "masked row must stay zero");
    }

    #[test]
    fn shared_param_node_accumulates_both_uses() {
        // loss = sum(w ⊙ w) ⇒ d/dw = 2w.
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b, "same parameter shares one node");
        let sq = g.mul(a, b);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        assert_eq!(grads.get(w).unwrap().as_slice(), &[6.0, -4.0]);
    }

    #[test]
    #[should_panic(expected = "target 9 outside vocabulary")]
    fn out_of_range_target_panics() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let logits = g.constant(Tensor::zeros(1, 3));
        g.step_cross_entropy(logits, vec![Some(9)]);
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(Tensor::zeros(2, 3));
        assert!(g.normalize_rows(z).is_err());
    }

    /// Every op, wired into one differentiable scalar, checked against
    /// central finite differences.
    #[test]
    fn composite_graph_passes_gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        let emb = store.add_uniform("emb", 5, 4, 0.5, &mut rng);
        let w = store.add_uniform("w", 6, 4, 0.5, &mut rng);
        let bias = store.add_uniform("bias", 1, 6, 0.5, &mut rng);
        let out_w = store.add_uniform("out_w", 4, 6, 0.5, &mut rng);

        let max_rel = gradient_check(&mut store, 1e-4, |g| {
            let table = g.param(emb);
            let x = g.gather_rows(table, &[0, 2, 4]);
            let wn = g.param(w);
            let bn = g.param(bias);
            let lin = g.matmul_nt(x, wn);
            let lin = g.add_bias(lin, bn);
            let left = g.slice_cols(lin, 0, 3);
            let right = g.slice_cols(lin, 3, 6);
            let gate = g.sigmoid(left);
            let cand = g.tanh(right);
            let mixed = g.mul(gate, cand);
            let both = g.concat_cols(mixed, gate);
            let feat = g.normalize_rows(both).unwrap();
            let feat = g.scale(feat, 2.5);
            let own = g.param(out_w);
            let logits = g.matmul_nt(feat, own);
            let shifted = g.sub_at_columns(logits, vec![Some(0), None, Some(2)], 0.35);
            let losses = g.step_cross_entropy(shifted, vec![Some(0), Some(1), None]);
            g.sum_all(losses)
        });
        assert!(max_rel < 1e-6, "max relative gradient error {max_rel}");
    }

    #[test]
    fn linear_layer_gradient_is_machine_precision() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let w = store.add_uniform("w", 4, 3, 0.5, &mut rng);
        let b = store.add_uniform("b", 1, 4, 0.5, &mut rng);
        let x = Tensor::from_vec(2, 3, vec![0.4, -1.0, 0.2, 1.3, 0.5, -0.7]);

        let max_rel = gradient_check(&mut store, 1e-4, |g| {
            let xn = g.constant(x.clone());
            let wn = g.param(w);
            let bn = g.param(b);
            let lin = g.matmul_nt(xn, wn);
            let lin = g.add_bias(lin, bn);
            let losses = g.step_cross_entropy(lin, vec![Some(3), Some(0)]);
            g.sum_all(losses)
        });
        assert!(max_rel < 1e-6, "max relative gradient error {max_rel}");
    }
}

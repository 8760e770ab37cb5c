//! Minimal reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! Every value is an `Array2<f64>`; scalars are 1×1 and vectors are 1×n rows
//! or n×1 columns. A [`Graph`] is a tape: nodes are appended in evaluation
//! order and [`Graph::backward`] walks the tape in reverse. Parameters live in
//! a [`ParamStore`] and are bound into a graph at most once, so a parameter
//! shared by two branches receives the sum of both gradient contributions.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulT(NodeId, NodeId),
    /// C · b with C constant
    ConstLeft(Arc<Array2<f64>>, NodeId),
    /// a · C with C constant
    ConstRight(NodeId, Arc<Array2<f64>>),
    /// a · Cᵀ with C constant
    ConstRightT(NodeId, Arc<Array2<f64>>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    LnClamped(NodeId, f64),
    Sqrt(NodeId),
    SoftmaxRows(NodeId),
    MaskedSoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    Shift(NodeId, isize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    TopkMeanCols(NodeId, Vec<Vec<usize>>),
    LayerNormRows { x: NodeId, xhat: Array2<f64>, inv_std: Array1<f64> },
    L2NormalizeRows(NodeId, Array1<f64>),
    BroadcastRows(NodeId),
    BroadcastCols(NodeId),
    Transpose(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Evaluation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

/// Gradients produced by a backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn rowwise_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that receives gradient but is not a stored parameter.
    pub fn variable(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter. Binding the same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, n);
        n
    }

    /// Copy of a node's value cut off from the tape.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    /// Gradients of every bound parameter, in parameter order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Array2<f64>)> {
        let mut out: Vec<(ParamId, Array2<f64>)> = self
            .params
            .iter()
            .filter_map(|(&p, &n)| grads.get(n).map(|g| (p, g.clone())))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn const_left_matmul(&mut self, c: Arc<Array2<f64>>, b: NodeId) -> NodeId {
        let v = c.dot(self.value(b));
        let ng = self.ng(b);
        self.push(v, Op::ConstLeft(c, b), ng)
    }

    pub fn const_right_matmul(&mut self, a: NodeId, c: Arc<Array2<f64>>) -> NodeId {
        let v = self.value(a).dot(c.as_ref());
        let ng = self.ng(a);
        self.push(v, Op::ConstRight(a, c), ng)
    }

    /// `a · Cᵀ` with `C` constant.
    pub fn const_right_matmul_t(&mut self, a: NodeId, c: Arc<Array2<f64>>) -> NodeId {
        let v = self.value(a).dot(&c.t());
        let ng = self.ng(a);
        self.push(v, Op::ConstRightT(a, c), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row` with a 1×n row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width mismatch");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row width mismatch");
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    /// `a ⊙ col` with a T×1 column broadcast over every column of `a`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        assert_eq!(self.shape(col).1, 1);
        assert_eq!(self.shape(a).0, self.shape(col).0, "mul_col height mismatch");
        let v = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// `ln(max(x, eps))`; zero gradient where the clamp is active.
    pub fn ln_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(eps).ln());
        let ng = self.ng(a);
        self.push(v, Op::LnClamped(a, eps), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = rowwise_softmax(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Row softmax restricted to entries where `keep` is true; other entries get weight 0.
    pub fn masked_softmax_rows(&mut self, a: NodeId, keep: &Array2<bool>) -> NodeId {
        assert_eq!(self.shape(a), keep.dim());
        let mut logits = self.value(a).clone();
        Zip::from(&mut logits).and(keep).for_each(|x, &k| {
            if !k {
                *x = f64::NEG_INFINITY;
            }
        });
        let v = rowwise_softmax(&logits);
        let ng = self.ng(a);
        self.push(v, Op::MaskedSoftmaxRows(a), ng)
    }

    /// T×n → T×1 row-wise log-sum-exp.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Array2::from_shape_fn((x.nrows(), 1), |(r, _)| {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
        });
        let ng = self.ng(a);
        self.push(v, Op::LogSumExpRows(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// T×n → T×1, summing across each row.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::SumRows(a), ng)
    }

    /// T×n → 1×n, summing down each column.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    /// `out[t] = a[t - k]`, zero where out of range.
    pub fn shift_rows(&mut self, a: NodeId, k: isize) -> NodeId {
        let x = self.value(a);
        let (t, d) = x.dim();
        let mut v = Array2::zeros((t, d));
        for i in 0..t as isize {
            let src = i - k;
            if src >= 0 && src < t as isize {
                v.row_mut(i as usize).assign(&x.row(src as usize));
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::Shift(a, k), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start, len), ng)
    }

    pub fn column(&mut self, a: NodeId, c: usize) -> NodeId {
        self.slice_cols(a, c, 1)
    }

    /// Per column, the mean of its `k` largest entries; T×n → 1×n.
    /// Ties are broken toward the earlier row.
    pub fn topk_mean_cols(&mut self, a: NodeId, k: usize) -> NodeId {
        let x = self.value(a);
        let (t, n) = x.dim();
        assert!(k >= 1 && k <= t, "top-k out of range");
        let mut picks = Vec::with_capacity(n);
        let mut v = Array2::zeros((1, n));
        for c in 0..n {
            let col = x.column(c);
            let mut idx: Vec<usize> = (0..t).collect();
            idx.sort_by(|&i, &j| col[j].total_cmp(&col[i]).then(i.cmp(&j)));
            idx.truncate(k);
            v[[0, c]] = idx.iter().map(|&i| col[i]).sum::<f64>() / k as f64;
            picks.push(idx);
        }
        let ng = self.ng(a);
        self.push(v, Op::TopkMeanCols(a, picks), ng)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (r, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std[r] = is;
        }
        let ng = self.ng(a);
        self.push(xhat.clone(), Op::LayerNormRows { x: a, xhat, inv_std }, ng)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
        let v = x / &norms.view().insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::L2NormalizeRows(a, norms), ng)
    }

    /// 1×n → rows×n
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        assert_eq!(self.shape(a).0, 1);
        let v = self.value(a).broadcast((rows, self.shape(a).1)).unwrap().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::BroadcastRows(a), ng)
    }

    /// T×1 → T×cols
    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        assert_eq!(self.shape(a).1, 1);
        let v = self.value(a).broadcast((self.shape(a).0, cols)).unwrap().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::BroadcastCols(a), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Backpropagate from a 1×1 node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar node");
        self.backward_with(loss, Array2::ones((1, 1)))
    }

    /// Backpropagate an arbitrary upstream gradient `seed` into `root`.
    pub fn backward_with(&self, root: NodeId, seed: Array2<f64>) -> Gradients {
        assert_eq!(self.shape(root), seed.dim(), "seed shape mismatch");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
        if !self.ng(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::ConstLeft(c, b) => self.accum(grads, *b, c.t().dot(g)),
            Op::ConstRight(a, c) => self.accum(grads, *a, g.dot(&c.t())),
            Op::ConstRightT(a, c) => self.accum(grads, *a, g.dot(c.as_ref())),
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                if self.ng(*row) {
                    self.accum(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    self.accum(grads, *a, g * self.value(*row));
                }
                if self.ng(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(grads, *row, gr);
                }
            }
            Op::MulCol(a, col) => {
                if self.ng(*a) {
                    self.accum(grads, *a, g * self.value(*col));
                }
                if self.ng(*col) {
                    let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accum(grads, *col, gc);
                }
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Scale(a, c) => self.accum(grads, *a, g * *c),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
                self.accum(grads, *a, d);
            }
            Op::Exp(a) => self.accum(grads, *a, g * y),
            Op::LnClamped(a, eps) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    *d = if x > *eps { *d / x } else { 0.0 };
                });
                self.accum(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = Zip::from(g).and(y).map_collect(|&g, &y| if y > 0.0 { g / (2.0 * y) } else { 0.0 });
                self.accum(grads, *a, d);
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = y * &(g - &dot);
                self.accum(grads, *a, d);
            }
            Op::LogSumExpRows(a) => {
                let sm = rowwise_softmax(self.value(*a));
                self.accum(grads, *a, sm * g);
            }
            Op::SumAll(a) => {
                let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accum(grads, *a, d);
            }
            Op::SumRows(a) => {
                let d = g.broadcast(self.shape(*a)).unwrap().to_owned();
                self.accum(grads, *a, d);
            }
            Op::SumCols(a) => {
                let d = g.broadcast(self.shape(*a)).unwrap().to_owned();
                self.accum(grads, *a, d);
            }
            Op::Shift(a, k) => {
                let (t, d) = g.dim();
                let mut out = Array2::zeros((t, d));
                for i in 0..t as isize {
                    let dst = i + k;
                    if dst >= 0 && dst < t as isize {
                        out.row_mut(i as usize).assign(&g.row(dst as usize));
                    }
                }
                self.accum(grads, *a, out);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        self.accum(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.ng(p) {
                        self.accum(grads, p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start, len) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + *len]).assign(g);
                self.accum(grads, *a, d);
            }
            Op::TopkMeanCols(a, picks) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (c, idx) in picks.iter().enumerate() {
                    let share = g[[0, c]] / idx.len() as f64;
                    for &i in idx {
                        d[[i, c]] += share;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LayerNormRows { x, xhat, inv_std } => {
                let n = xhat.ncols() as f64;
                let mean_g = g.sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                let mean_gx = (g * xhat).sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                let d = (g - &mean_g - &(xhat * &mean_gx)) * &inv_std.view().insert_axis(Axis(1));
                self.accum(grads, *x, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let gy = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = (g - &(y * &gy)) / &norms.view().insert_axis(Axis(1));
                self.accum(grads, *a, d);
            }
            Op::BroadcastRows(a) => {
                self.accum(grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::BroadcastCols(a) => {
                self.accum(grads, *a, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Transpose(a) => self.accum(grads, *a, g.t().to_owned()),
        }
    }
}

/// Row softmax of a plain matrix, outside any tape.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    rowwise_softmax(x)
}

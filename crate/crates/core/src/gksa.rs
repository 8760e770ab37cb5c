//! Global knowledge summarization and aggregation.
//!
//! A set of learnable latent codewords interacts through self-attention to
//! form memory queries, which then read the memory bank through sparse
//! (top-m) cross-attention followed by a feed-forward block. The resulting
//! summary is mixed into segment features by parameter-free attention and
//! fused with the original features; the shared classification head turns
//! the fused features into the pseudo TCAM.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::heads::CamHead;
use crate::params::{kaiming, normal, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GksaConfig {
    pub num_codewords: usize,
    /// Hidden width of the feed-forward blocks.
    pub ffn_dim: usize,
    /// Keys kept per codeword in the sparse cross-attention.
    pub sparse_topk: usize,
}

impl Default for GksaConfig {
    fn default() -> Self {
        Self { num_codewords: 40, ffn_dim: 128, sparse_topk: 64 }
    }
}

/// Fixed sinusoidal encoding over codeword index.
pub fn sinusoidal_encoding(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), kaiming(rng, input, (input, output))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, output))),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Array2::zeros((input, output))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, output))),
        }
    }

    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Array2::eye(dim)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Linear → ReLU → Linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub first: Linear,
    pub second: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.first.forward(g, store, x);
        let h = g.relu(h);
        self.second.forward(g, store, h)
    }
}

/// Row layer normalization with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            shift: store.add(format!("{name}.shift"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}

/// Per-entry 1×1 depthwise-separable projection of constant memory rows:
/// a per-channel affine map followed by a pointwise linear map.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparable {
    pub depth_scale: ParamId,
    pub depth_shift: ParamId,
    pub point: Linear,
}

impl DepthwiseSeparable {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            depth_scale: store.add(format!("{name}.depth_scale"), Array2::ones((1, dim))),
            depth_shift: store.add(format!("{name}.depth_shift"), Array2::zeros((1, dim))),
            point: Linear::new(store, &format!("{name}.point"), dim, dim, rng),
        }
    }

    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            depth_scale: store.add(format!("{name}.depth_scale"), Array2::ones((1, dim))),
            depth_shift: store.add(format!("{name}.depth_shift"), Array2::zeros((1, dim))),
            point: Linear::identity(store, &format!("{name}.point"), dim),
        }
    }

    /// `(M ⊙ s + t)·W + b`, computed as `M·(diag(s)·W) + (t·W + b)` so the
    /// memory matrix is never copied into the tape.
    pub fn forward_const(&self, g: &mut Graph, store: &ParamStore, memory: &Arc<Array2<f64>>) -> NodeId {
        let s = g.param(store, self.depth_scale);
        let t = g.param(store, self.depth_shift);
        let w = g.param(store, self.point.weight);
        let b = g.param(store, self.point.bias);
        let s_col = g.transpose(s);
        let w_eff = g.mul_col(w, s_col);
        let body = g.const_left_matmul(memory.clone(), w_eff);
        let tw = g.matmul(t, w);
        let offset = g.add(tw, b);
        g.add_row(body, offset)
    }
}

/// Outputs of the summarizer, with the attention maps kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct SummaryNodes {
    pub queries: NodeId,
    pub self_attention: NodeId,
    pub cross_attention: NodeId,
    pub summary: NodeId,
}

#[derive(Clone, Debug)]
pub struct Summarizer {
    pub codewords: ParamId,
    pub positional: Array2<f64>,
    pub key_mlp: FeedForward,
    pub value_mlp: FeedForward,
    pub query_proj: Linear,
    pub self_norm: LayerNorm,
    pub memory_key: DepthwiseSeparable,
    pub memory_value: DepthwiseSeparable,
    pub cross_query: Linear,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
    pub sparse_topk: usize,
}

impl Summarizer {
    pub fn new(store: &mut ParamStore, dim: usize, cfg: &GksaConfig, rng: &mut impl Rng) -> Self {
        let n = cfg.num_codewords;
        Self {
            codewords: store.add("gks.codewords", normal(rng, 1.0, (n, dim))),
            positional: sinusoidal_encoding(n, dim),
            key_mlp: FeedForward::new(store, "gks.key_mlp", 2 * dim, dim, dim, rng),
            value_mlp: FeedForward::new(store, "gks.value_mlp", 2 * dim, dim, dim, rng),
            query_proj: Linear::new(store, "gks.query", dim, dim, rng),
            self_norm: LayerNorm::new(store, "gks.self_norm", dim),
            memory_key: DepthwiseSeparable::new(store, "gks.memory_key", dim, rng),
            memory_value: DepthwiseSeparable::new(store, "gks.memory_value", dim, rng),
            cross_query: Linear::new(store, "gks.cross_query", dim, dim, rng),
            cross_norm: LayerNorm::new(store, "gks.cross_norm", dim),
            ffn: FeedForward::new(store, "gks.ffn", dim, cfg.ffn_dim, dim, rng),
            ffn_norm: LayerNorm::new(store, "gks.ffn_norm", dim),
            sparse_topk: cfg.sparse_topk,
        }
    }

    pub fn dim(&self) -> usize {
        self.positional.ncols()
    }

    /// Codeword self-attention: keys and values from MLPs over `[R, PE]`,
    /// queries from `R`, residual + normalization. Returns (queries, attention).
    pub fn codeword_self_attention(&self, g: &mut Graph, store: &ParamStore) -> (NodeId, NodeId) {
        let r = g.param(store, self.codewords);
        let pe = g.constant(self.positional.clone());
        let rp = g.concat_cols(&[r, pe]);
        let k = self.key_mlp.forward(g, store, rp);
        let v = self.value_mlp.forward(g, store, rp);
        let q = self.query_proj.forward(g, store, r);
        let scores = g.matmul_t(q, k);
        let scores = g.scale(scores, 1.0 / (self.dim() as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let mixed = g.matmul(attn, v);
        let res = g.add(r, mixed);
        (self.self_norm.forward(g, store, res), attn)
    }

    /// Sparse cross-attention from the memory queries into the (unit-norm)
    /// memory rows, then the feed-forward block.
    pub fn summarize_memory(&self, g: &mut Graph, store: &ParamStore, queries: NodeId, memory: &Arc<Array2<f64>>) -> (NodeId, NodeId) {
        assert!(memory.nrows() > 0, "summarization needs a non-empty memory");
        let km = self.memory_key.forward_const(g, store, memory);
        let vm = self.memory_value.forward_const(g, store, memory);
        let pe = g.constant(self.positional.clone());
        let qpe = g.add(queries, pe);
        let q = self.cross_query.forward(g, store, qpe);
        let scores = g.matmul_t(q, km);
        let scores = g.scale(scores, 1.0 / (self.dim() as f64).sqrt());
        let keep = top_m_mask(g.value(scores), self.sparse_topk);
        let attn = g.masked_softmax_rows(scores, &keep);
        let read = g.matmul(attn, vm);
        let x = g.add(queries, read);
        let x = self.cross_norm.forward(g, store, x);
        let h = self.ffn.forward(g, store, x);
        let y = g.add(x, h);
        (self.ffn_norm.forward(g, store, y), attn)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, memory: &Arc<Array2<f64>>) -> SummaryNodes {
        let (queries, self_attention) = self.codeword_self_attention(g, store);
        let (summary, cross_attention) = self.summarize_memory(g, store, queries, memory);
        SummaryNodes { queries, self_attention, cross_attention, summary }
    }

    /// Summary value without keeping the tape.
    pub fn summarize(&self, store: &ParamStore, memory: &Arc<Array2<f64>>) -> Array2<f64> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, store, memory);
        g.value(nodes.summary).clone()
    }
}

/// Per row, keep the `m` largest scores (ties toward lower index); `m ≥ cols` keeps all.
pub fn top_m_mask(scores: &Array2<f64>, m: usize) -> Array2<bool> {
    let (rows, cols) = scores.dim();
    if m >= cols {
        return Array2::from_elem((rows, cols), true);
    }
    let mut keep = Array2::from_elem((rows, cols), false);
    let mut idx: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = scores.row(r);
        idx.clear();
        idx.extend(0..cols);
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if m > 0 {
            idx.select_nth_unstable_by(m - 1, cmp);
        }
        for &c in &idx[..m] {
            keep[[r, c]] = true;
        }
    }
    keep
}

/// Parameter-free attention from segment features onto summary rows:
/// `softmax(F·Sᵀ/√D)·S`.
pub fn aggregate_node(g: &mut Graph, f: NodeId, summary: NodeId) -> NodeId {
    let d = g.shape(f).1 as f64;
    let scores = g.matmul_t(f, summary);
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let attn = g.softmax_rows(scores);
    g.matmul(attn, summary)
}

/// [`aggregate_node`] against a constant row set (raw memory rows).
pub fn aggregate_const(g: &mut Graph, f: NodeId, rows: &Arc<Array2<f64>>) -> NodeId {
    let d = g.shape(f).1 as f64;
    let scores = g.const_right_matmul_t(f, rows.clone());
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let attn = g.softmax_rows(scores);
    g.const_right_matmul(attn, rows.clone())
}

pub fn aggregate(f: &Array2<f64>, summary: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::new();
    let fn_ = g.constant(f.clone());
    let s = g.constant(summary.clone());
    let out = aggregate_node(&mut g, fn_, s);
    g.value(out).clone()
}

/// Feed-forward over `[F′, F]` back to width D, residual from `F`, normalization.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub ffn: FeedForward,
    pub norm: LayerNorm,
}

impl Fusion {
    /// The last layer starts at zero so the fused features begin as the
    /// normalized residual of `F`.
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            ffn: FeedForward {
                first: Linear::new(store, "fuse.0", 2 * dim, dim, rng),
                second: Linear::zeros(store, "fuse.1", dim, dim),
            },
            norm: LayerNorm::new(store, "fuse.norm", dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, enriched: NodeId, f: NodeId) -> NodeId {
        let cat = g.concat_cols(&[enriched, f]);
        let h = self.ffn.forward(g, store, cat);
        let y = g.add(f, h);
        self.norm.forward(g, store, y)
    }
}

/// Pseudo TCAM from fused features through the shared head.
pub fn pseudo_cam_node(g: &mut Graph, store: &ParamStore, fused: NodeId, head: &CamHead) -> NodeId {
    head.forward(g, store, fused)
}

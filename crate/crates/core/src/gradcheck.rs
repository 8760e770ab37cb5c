//! Central finite-difference checks of the analytic gradients.
//!
//! Every differentiable leaf of a check, inputs included, is held in one
//! [`ParamStore`], so inputs and parameters are perturbed the same way.
//! Selections that are constant during differentiation (segment masks, the
//! pseudo-label weights, the sparse attention pattern) are fixed at the base
//! point, matching what training does.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::contrast::{contrastive_loss_node, ContrastConfig};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::gksa::{aggregate_node, pseudo_cam_node, Fusion, GksaConfig, Summarizer};
use crate::heads::{classification_loss_node, topk_pool_node, weight_cam_node, AttentionHead, Branch, CamHead};
use crate::memory::{representative_node, SegmentMask};
use crate::params::{normal, ParamStore};
use crate::pseudo::{pseudo_loss_node, pseudo_loss_node_frozen, uncertainty, uncertainty_node, PseudoConfig};

/// Initial step of the fourth-order central stencil
/// `f′ ≈ [f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)] / 12h`. Its roundoff is an
/// order below the two-point rule at the step that rule would need.
pub const STEP: f64 = 1e-4;
/// The stencil is trusted when the two second-order one-sided derivatives and
/// the central estimate agree within `KINK_SLACK·(1 + |f′|)`, far above their
/// truncation and roundoff on smooth entries. Otherwise a ReLU or top-k
/// boundary lies inside the stencil and the step is divided by four.
const KINK_SLACK: f64 = 1e-6;
const MAX_REFINEMENTS: usize = 6;
pub const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Names accepted by [`gradient_check`].
pub const CHECKS: &[&str] = &[
    "embed",
    "cam",
    "attention",
    "weight_cam",
    "topk_pool",
    "classification",
    "representative",
    "contrast",
    "self_attention",
    "summarize",
    "aggregate",
    "fuse",
    "pseudo_cam",
    "uncertainty",
    "pseudo",
    "pseudo_end_to_end",
    "total",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceSize {
    pub segments: usize,
    pub in_dim: usize,
    pub dim: usize,
    pub classes: usize,
    pub codewords: usize,
    pub memory_rows: usize,
}

impl Default for InstanceSize {
    fn default() -> Self {
        Self { segments: 6, in_dim: 7, dim: 5, classes: 3, codewords: 4, memory_rows: 6 }
    }
}

/// Worst error over the entries of one leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafError {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub check: String,
    pub tolerance: f64,
    pub leaves: Vec<LeafError>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error <= self.tolerance)
    }

    pub fn offending(&self) -> Vec<&LeafError> {
        self.leaves.iter().filter(|l| !(l.max_rel_error <= self.tolerance)).collect()
    }

    /// `Err` naming the offending leaves when any exceeds the tolerance.
    pub fn ensure(&self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let list: Vec<String> = self.offending().iter().map(|l| format!("{} ({:.3e})", l.name, l.max_rel_error)).collect();
        Err(Error::Contract(format!(
            "gradient check {} above tolerance {:e}: {}",
            self.check,
            self.tolerance,
            list.join(", ")
        )))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the tape gradient of `build` against central differences for
/// every leaf in `store`. The store is restored before returning.
pub fn check_gradients(
    check: &str,
    store: &mut ParamStore,
    tolerance: f64,
    build: impl Fn(&mut Graph, &ParamStore) -> NodeId,
) -> GradReport {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    assert_eq!(g.shape(loss), (1, 1), "gradient checks need a scalar objective");
    let grads = g.backward(loss);
    let mut analytic: Vec<Array2<f64>> = store.zeros_like();
    for (id, grad) in g.param_grads(&grads) {
        analytic[id.index()] = grad;
    }

    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, store);
        g.scalar(l)
    };
    let ids: Vec<_> = store.ids().collect();
    let mut leaves = Vec::with_capacity(ids.len());
    for id in ids {
        let dim = store.get(id).dim();
        let mut worst = 0.0f64;
        for idx in ndarray::indices(dim) {
            let base = store.get(id)[idx];
            let mut at = |offset: f64| {
                store.get_mut(id)[idx] = base + offset;
                eval(store)
            };
            let f0 = at(0.0);
            let mut h = STEP;
            let mut refinements = 0;
            let numeric = loop {
                let (m2, m1, p1, p2) = (at(-2.0 * h), at(-h), at(h), at(2.0 * h));
                let central = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
                let right = (-3.0 * f0 + 4.0 * p1 - p2) / (2.0 * h);
                let left = (3.0 * f0 - 4.0 * m1 + m2) / (2.0 * h);
                let spread = (right - left).abs().max((central - 0.5 * (left + right)).abs());
                let smooth = spread <= KINK_SLACK * (1.0 + central.abs());
                if smooth || refinements == MAX_REFINEMENTS {
                    break central;
                }
                h /= 4.0;
                refinements += 1;
            };
            store.get_mut(id)[idx] = base;
            let err = relative_error(analytic[id.index()][idx], numeric);
            // NaN propagates as a failure
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
        }
        leaves.push(LeafError { name: store.name(id).to_string(), entries: dim.0 * dim.1, max_rel_error: worst });
    }
    GradReport { check: check.to_string(), tolerance, leaves }
}

/// Fixed, non-degenerate readout weights turning a matrix into a scalar.
fn probe(shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |(i, j)| ((i * 31 + j * 17 + 1) as f64 * 0.7).sin())
}

fn readout(g: &mut Graph, y: NodeId) -> NodeId {
    let w = g.constant(probe(g.shape(y)));
    let p = g.mul(y, w);
    g.sum_all(p)
}

/// Move every parameter off its initial value so zero-initialized biases and
/// layers do not hide gradient paths.
fn jitter(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let noise = normal(rng, 0.1, store.get(id).dim());
        *store.get_mut(id) += &noise;
    }
}

fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

fn random_labels(rng: &mut impl Rng, classes: usize) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..classes).map(|_| u8::from(rng.random_bool(0.5))).collect();
    if labels.iter().all(|&l| l == 0) {
        labels[rng.random_range(0..classes)] = 1;
    }
    labels
}

fn random_mask(rng: &mut impl Rng, t: usize) -> SegmentMask {
    let mut bits: Vec<bool> = (0..t).map(|_| rng.random_bool(0.5)).collect();
    if !bits.iter().any(|&b| b) {
        bits[0] = true;
    }
    SegmentMask { bits, degenerate: false }
}

fn gksa_config(size: &InstanceSize) -> GksaConfig {
    // fewer kept keys than memory rows, so the sparse path is exercised
    GksaConfig { num_codewords: size.codewords, ffn_dim: size.dim + 2, sparse_topk: (size.memory_rows / 2).max(1) }
}

/// Blocks shared by the composite checks.
struct Network {
    embedder: Embedder,
    cam: CamHead,
    attention: AttentionHead,
    summarizer: Summarizer,
    fusion: Fusion,
}

impl Network {
    fn new(store: &mut ParamStore, size: &InstanceSize, rng: &mut impl Rng) -> Self {
        Self {
            embedder: Embedder::new(store, size.in_dim, size.dim, 1, rng),
            cam: CamHead::new(store, size.dim, size.classes + 1, rng),
            attention: AttentionHead::new(store, size.dim, rng),
            summarizer: Summarizer::new(store, size.dim, &gksa_config(size), rng),
            fusion: Fusion::new(store, size.dim, rng),
        }
    }
}

/// Main branch up to the weighted TCAMs: (F, A, W, [A^ins, A^con, A^back]).
fn main_branch(net: &Network, g: &mut Graph, store: &ParamStore, x: NodeId) -> (NodeId, NodeId, NodeId, [NodeId; 3]) {
    let f = net.embedder.forward(g, store, x);
    let a = net.cam.forward(g, store, f);
    let w = net.attention.forward(g, store, f);
    let weighted = Branch::ALL.map(|b| weight_cam_node(g, a, w, b));
    (f, a, w, weighted)
}

/// Pseudo TCAM from F through summarization, aggregation, fusion and the shared head.
fn pseudo_branch(net: &Network, g: &mut Graph, store: &ParamStore, f: NodeId, memory: &Arc<Array2<f64>>) -> NodeId {
    let summary = net.summarizer.forward(g, store, memory).summary;
    let enriched = aggregate_node(g, f, summary);
    let fused = net.fusion.forward(g, store, enriched, f);
    pseudo_cam_node(g, store, fused, &net.cam)
}

const TOPK_RATIO: usize = 2;

/// Run the named check on a random instance of `size`.
pub fn gradient_check(name: &str, size: &InstanceSize, tolerance: f64, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let (t, d, k) = (size.segments, size.dim, size.classes + 1);
    let mut store = ParamStore::new();
    let report = match name {
        "embed" => {
            let emb = Embedder::new(&mut store, size.in_dim, d, 2, rng);
            let x = store.add("input.x", normal(rng, 1.0, (t, size.in_dim)));
            jitter(&mut store, rng);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let x = g.param(s, x);
                let f = emb.forward(g, s, x);
                readout(g, f)
            })
        }
        "cam" => {
            let head = CamHead::new(&mut store, d, k, rng);
            let f = store.add("input.features", normal(rng, 1.0, (t, d)));
            jitter(&mut store, rng);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let f = g.param(s, f);
                let a = head.forward(g, s, f);
                readout(g, a)
            })
        }
        "attention" => {
            let head = AttentionHead::new(&mut store, d, rng);
            let f = store.add("input.features", normal(rng, 1.0, (t, d)));
            jitter(&mut store, rng);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let f = g.param(s, f);
                let w = head.forward(g, s, f);
                readout(g, w)
            })
        }
        "weight_cam" => {
            let a = store.add("input.cam", normal(rng, 1.0, (t, k)));
            let w = store.add("input.weights", normal(rng, 1.0, (t, 3)));
            check_gradients(name, &mut store, tolerance, |g, s| {
                let a = g.param(s, a);
                let w = g.param(s, w);
                let outs = Branch::ALL.map(|b| {
                    let y = weight_cam_node(g, a, w, b);
                    readout(g, y)
                });
                let sum = g.add(outs[0], outs[1]);
                g.add(sum, outs[2])
            })
        }
        "topk_pool" => {
            let a = store.add("input.cam", normal(rng, 1.0, (t, k)));
            check_gradients(name, &mut store, tolerance, |g, s| {
                let a = g.param(s, a);
                let p = topk_pool_node(g, a, TOPK_RATIO);
                readout(g, p)
            })
        }
        "classification" => {
            let net = Network::new(&mut store, size, rng);
            let x = store.add("input.x", normal(rng, 1.0, (t, size.in_dim)));
            let labels = random_labels(rng, size.classes);
            jitter(&mut store, rng);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let x = g.param(s, x);
                let (_, _, _, weighted) = main_branch(&net, g, s, x);
                let losses = Branch::ALL.map(|b| {
                    let p = topk_pool_node(g, weighted[b.column()], TOPK_RATIO);
                    classification_loss_node(g, p, &labels, b).expect("labels have a foreground class")
                });
                let sum = g.add(losses[0], losses[1]);
                g.add(sum, losses[2])
            })
        }
        "representative" => {
            let f = store.add("input.features", normal(rng, 1.0, (t, d)));
            let mask = random_mask(rng, t);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let f = g.param(s, f);
                let beta = representative_node(g, f, &mask).expect("mask is non-empty");
                let beta = g.l2_normalize_rows(beta);
                readout(g, beta)
            })
        }
        "contrast" => {
            let beta = store.add("input.beta", normal(rng, 1.0, (1, d)));
            let pos = Arc::new(unit_rows(normal(rng, 1.0, (2, d))));
            let neg = Arc::new(unit_rows(normal(rng, 1.0, (3, d))));
            let cfg = ContrastConfig::default();
            check_gradients(name, &mut store, tolerance, |g, s| {
                let b = g.param(s, beta);
                let b = g.l2_normalize_rows(b);
                contrastive_loss_node(g, b, &pos, &neg, &cfg).expect("unit-norm inputs")
            })
        }
        "self_attention" => {
            let sum = Summarizer::new(&mut store, d, &gksa_config(size), rng);
            jitter(&mut store, rng);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let (q, _) = sum.codeword_self_attention(g, s);
                readout(g, q)
            })
        }
        "summarize" => {
            let sum = Summarizer::new(&mut store, d, &gksa_config(size), rng);
            let memory = Arc::new(unit_rows(normal(rng, 1.0, (size.memory_rows, d))));
            jitter(&mut store, rng);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let nodes = sum.forward(g, s, &memory);
                readout(g, nodes.summary)
            })
        }
        "aggregate" => {
            let f = store.add("input.features", normal(rng, 1.0, (t, d)));
            let summary = store.add("input.summary", normal(rng, 1.0, (size.codewords, d)));
            check_gradients(name, &mut store, tolerance, |g, s| {
                let f = g.param(s, f);
                let m = g.param(s, summary);
                let y = aggregate_node(g, f, m);
                readout(g, y)
            })
        }
        "fuse" => {
            let fusion = Fusion::new(&mut store, d, rng);
            let e = store.add("input.enriched", normal(rng, 1.0, (t, d)));
            let f = store.add("input.features", normal(rng, 1.0, (t, d)));
            jitter(&mut store, rng);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let e = g.param(s, e);
                let f = g.param(s, f);
                let y = fusion.forward(g, s, e, f);
                readout(g, y)
            })
        }
        "pseudo_cam" => {
            let head = CamHead::new(&mut store, d, k, rng);
            let fused = store.add("input.fused", normal(rng, 1.0, (t, d)));
            jitter(&mut store, rng);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let x = g.param(s, fused);
                let y = pseudo_cam_node(g, s, x, &head);
                readout(g, y)
            })
        }
        "uncertainty" => {
            let a = store.add("input.cam", normal(rng, 1.0, (t, k)));
            let ah = store.add("input.pseudo_cam", normal(rng, 1.0, (t, k)));
            let eps = PseudoConfig::default().eps;
            check_gradients(name, &mut store, tolerance, |g, s| {
                let a = g.param(s, a);
                let ah = g.param(s, ah);
                let dn = uncertainty_node(g, a, ah, eps);
                readout(g, dn)
            })
        }
        "pseudo" => {
            let a0 = normal(rng, 1.0, (t, k));
            let ah0 = normal(rng, 1.0, (t, k));
            let cfg = PseudoConfig::default();
            let weight = frozen_weight(&a0, &ah0, &cfg);
            let a = store.add("input.cam", a0);
            let ah = store.add("input.pseudo_cam", ah0);
            check_gradients(name, &mut store, tolerance, |g, s| {
                let a = g.param(s, a);
                let ah = g.param(s, ah);
                pseudo_loss_node_frozen(g, a, ah, weight.clone(), &cfg)
            })
        }
        "pseudo_end_to_end" | "total" => {
            let net = Network::new(&mut store, size, rng);
            let x = store.add("input.x", normal(rng, 1.0, (t, size.in_dim)));
            let memory = Arc::new(unit_rows(normal(rng, 1.0, (size.memory_rows, d))));
            let labels = random_labels(rng, size.classes);
            let mask = random_mask(rng, t);
            let pos = Arc::new(unit_rows(normal(rng, 1.0, (2, d))));
            let neg = Arc::new(unit_rows(normal(rng, 1.0, (3, d))));
            jitter(&mut store, rng);
            let pseudo_cfg = PseudoConfig::default();
            let contrast_cfg = ContrastConfig::default();
            let (gamma, mu) = (1.0, 0.1);

            // pseudo-label weights at the base point
            let weight = {
                let mut g = Graph::new();
                let xn = g.param(&store, x);
                let (f, a, _, _) = main_branch(&net, &mut g, &store, xn);
                let ah = pseudo_branch(&net, &mut g, &store, f, &memory);
                let w = frozen_weight(g.value(a), g.value(ah), &pseudo_cfg);
                let frozen = pseudo_loss_node_frozen(&mut g, a, ah, w.clone(), &pseudo_cfg);
                let live = pseudo_loss_node(&mut g, a, ah, &pseudo_cfg);
                assert_eq!(g.scalar(frozen), g.scalar(live));
                w
            };
            let total = name == "total";
            check_gradients(name, &mut store, tolerance, |g, s| {
                let xn = g.param(s, x);
                let (f, a, _, weighted) = main_branch(&net, g, s, xn);
                let ah = pseudo_branch(&net, g, s, f, &memory);
                let ps = pseudo_loss_node_frozen(g, a, ah, weight.clone(), &pseudo_cfg);
                if !total {
                    return ps;
                }
                let mut obj = g.scale(ps, gamma);
                for b in Branch::ALL {
                    let p = topk_pool_node(g, weighted[b.column()], TOPK_RATIO);
                    let l = classification_loss_node(g, p, &labels, b).expect("labels have a foreground class");
                    obj = g.add(obj, l);
                }
                let beta = representative_node(g, f, &mask).expect("mask is non-empty");
                let beta = g.l2_normalize_rows(beta);
                let lc = contrastive_loss_node(g, beta, &pos, &neg, &contrast_cfg).expect("unit-norm inputs");
                let lc = g.scale(lc, mu);
                g.add(obj, lc)
            })
        }
        other => return Err(Error::Config(format!("unknown gradient check {other:?}; expected one of {}", CHECKS.join(", ")))),
    };
    Ok(report)
}

fn frozen_weight(a: &Array2<f64>, ah: &Array2<f64>, cfg: &PseudoConfig) -> Array2<f64> {
    let d: Array1<f64> = uncertainty(a, ah, cfg.eps);
    d.mapv(|v| (-v).exp()).insert_axis(ndarray::Axis(1))
}

/// Every check in [`CHECKS`].
pub fn run_all(size: &InstanceSize, tolerance: f64, seed: u64) -> Vec<GradReport> {
    CHECKS
        .iter()
        .map(|name| gradient_check(name, size, tolerance, seed).expect("listed checks exist"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_the_default_instance() {
        for r in run_all(&InstanceSize::default(), DEFAULT_TOLERANCE, 3) {
            assert!(r.passed(), "{}: {:?}", r.check, r.offending());
            assert!(r.leaves.iter().all(|l| l.entries > 0));
        }
    }

    #[test]
    fn small_instances_from_the_contract() {
        let tiny = InstanceSize { segments: 3, in_dim: 4, dim: 4, classes: 2, codewords: 2, memory_rows: 3 };
        for name in ["classification", "contrast", "pseudo_end_to_end"] {
            let r = gradient_check(name, &tiny, DEFAULT_TOLERANCE, 1).unwrap();
            r.ensure().unwrap();
        }
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // relu at a kink has no derivative the tape can match on both sides
        let mut store = ParamStore::new();
        let x = store.add("input.x", ndarray::array![[0.0, 1.0]]);
        let r = check_gradients("kink", &mut store, DEFAULT_TOLERANCE, |g, s| {
            let x = g.param(s, x);
            let y = g.relu(x);
            g.sum_all(y)
        });
        assert!(!r.passed());
        assert_eq!(r.offending()[0].name, "input.x");
        assert!(r.ensure().is_err());
        assert_eq!(store.get(x), &ndarray::array![[0.0, 1.0]]);
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(gradient_check("nope", &InstanceSize::default(), 1e-4, 0), Err(Error::Config(_))));
    }
}

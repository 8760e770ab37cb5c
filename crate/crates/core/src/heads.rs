//! Classification head, three-branch attention, top-k MIL pooling and the
//! branch-wise video classification losses.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::embedder::TemporalConv;
use crate::error::{Error, Result};
use crate::params::{kaiming, ParamId, ParamStore};

pub const PROB_EPS: f64 = 1e-8;

/// Attention branch: action instance, action context, background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Instance,
    Context,
    Background,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Instance, Branch::Context, Branch::Background];

    pub fn column(self) -> usize {
        match self {
            Branch::Instance => 0,
            Branch::Context => 1,
            Branch::Background => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Instance => "ins",
            Branch::Context => "con",
            Branch::Background => "back",
        }
    }
}

/// Fully connected map from embeddings to C+1 class activations. One instance
/// serves both the main and the auxiliary branch.
#[derive(Clone, Debug)]
pub struct CamHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub num_outputs: usize,
}

impl CamHead {
    pub fn new(store: &mut ParamStore, dim: usize, num_outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add("cam.weight", kaiming(rng, dim, (dim, num_outputs)));
        let bias = store.add("cam.bias", Array2::zeros((1, num_outputs)));
        Self { weight, bias, num_outputs }
    }

    /// `weight` is `dim × (C+1)`.
    pub fn from_weights(store: &mut ParamStore, weight: Array2<f64>, bias: Array2<f64>) -> Self {
        let num_outputs = weight.ncols();
        let weight = store.add("cam.weight", weight);
        let bias = store.add("cam.bias", bias);
        Self { weight, bias, num_outputs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(f, w);
        g.add_row(y, b)
    }
}

/// Single temporal convolution (width 3) producing three branch logits per segment.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub conv: TemporalConv,
}

impl AttentionHead {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Self {
        Self { conv: TemporalConv::new(store, "att", 3, dim, 3, rng) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: NodeId) -> NodeId {
        let logits = self.conv.forward(g, store, f);
        g.softmax_rows(logits)
    }
}

/// Scale every row of a TCAM by that segment's weight for `branch`.
pub fn weight_cam_node(g: &mut Graph, cam: NodeId, weights: NodeId, branch: Branch) -> NodeId {
    let w = g.column(weights, branch.column());
    g.mul_col(cam, w)
}

pub fn topk_count(t: usize, ratio: usize) -> usize {
    (t / ratio.max(1)).max(1)
}

/// Mean of the top-k activations per class followed by a class softmax.
pub fn topk_pool_node(g: &mut Graph, cam: NodeId, ratio: usize) -> NodeId {
    let k = topk_count(g.shape(cam).0, ratio);
    let logits = g.topk_mean_cols(cam, k);
    g.softmax_rows(logits)
}

/// Normalized target distribution over C+1 classes for one branch.
pub fn branch_target(labels: &[u8], branch: Branch) -> Result<Array1<f64>> {
    let c = labels.len();
    let mut y = Array1::zeros(c + 1);
    match branch {
        Branch::Instance => {
            for (i, &l) in labels.iter().enumerate() {
                y[i] = f64::from(l != 0);
            }
        }
        Branch::Context => {
            for (i, &l) in labels.iter().enumerate() {
                y[i] = f64::from(l != 0);
            }
            y[c] = 1.0;
        }
        Branch::Background => y[c] = 1.0,
    }
    let sum = y.sum();
    if sum == 0.0 {
        return Err(Error::Config("instance-branch target needs at least one foreground label".into()));
    }
    Ok(y / sum)
}

/// Cross-entropy of a 1×(C+1) probability node against the branch target.
pub fn classification_loss_node(g: &mut Graph, probs: NodeId, labels: &[u8], branch: Branch) -> Result<NodeId> {
    let y = branch_target(labels, branch)?;
    let y = g.constant(y.insert_axis(ndarray::Axis(0)));
    let logp = g.ln_clamped(probs, PROB_EPS);
    let prod = g.mul(logp, y);
    let s = g.sum_all(prod);
    Ok(g.scale(s, -1.0))
}

pub fn compute_cam(f: &Array2<f64>, head: &CamHead, store: &ParamStore) -> Array2<f64> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let a = head.forward(&mut g, store, x);
    g.value(a).clone()
}

pub fn compute_attention(f: &Array2<f64>, head: &AttentionHead, store: &ParamStore) -> Array2<f64> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let w = head.forward(&mut g, store, x);
    g.value(w).clone()
}

pub fn weight_cam(cam: &Array2<f64>, weights: &Array2<f64>, branch: Branch) -> Array2<f64> {
    assert_eq!(cam.nrows(), weights.nrows());
    let col = weights.column(branch.column()).to_owned().insert_axis(ndarray::Axis(1));
    cam * &col
}

/// Video-level class probabilities from a (weighted) TCAM.
pub fn topk_pool(cam: &Array2<f64>, ratio: usize) -> Array1<f64> {
    let mut g = Graph::new();
    let a = g.constant(cam.clone());
    let p = topk_pool_node(&mut g, a, ratio);
    g.value(p).row(0).to_owned()
}

pub fn classification_loss(probs: &Array1<f64>, labels: &[u8], branch: Branch) -> Result<f64> {
    let y = branch_target(labels, branch)?;
    Ok(-probs.iter().zip(y.iter()).map(|(&p, &y)| y * p.max(PROB_EPS).ln()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn cam_zero_identity_and_affine() {
        let mut store = ParamStore::new();
        let head = CamHead::from_weights(&mut store, Array2::zeros((3, 4)), Array2::zeros((1, 4)));
        assert_eq!(compute_cam(&Array2::zeros((2, 3)), &head, &store), Array2::<f64>::zeros((2, 4)));

        let mut store = ParamStore::new();
        let head = CamHead::from_weights(&mut store, Array2::eye(2), Array2::zeros((1, 2)));
        assert_eq!(compute_cam(&array![[1.0, 0.0]], &head, &store), array![[1.0, 0.0]]);

        // weight [[2],[-1]] in (C+1)×D orientation
        let mut store = ParamStore::new();
        let head = CamHead::from_weights(&mut store, array![[2.0, -1.0]], array![[0.5, 0.0]]);
        assert_eq!(compute_cam(&array![[3.0]], &head, &store), array![[6.5, -3.0]]);
    }

    #[test]
    fn attention_softmax_cases() {
        let mut store = ParamStore::new();
        let zero = Array2::zeros((2, 3));
        let conv = TemporalConv::from_taps(&mut store, "att", &[zero.clone(), zero.clone(), zero], Array2::zeros((1, 3)));
        let head = AttentionHead { conv };
        let w = compute_attention(&array![[1.0, 2.0], [3.0, 4.0]], &head, &store);
        for v in w.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut store = ParamStore::new();
        let zero = Array2::zeros((1, 3));
        let conv = TemporalConv::from_taps(&mut store, "att", &[zero.clone(), zero.clone(), zero], array![[2f64.ln(), 0.0, 0.0]]);
        let head = AttentionHead { conv };
        let w = compute_attention(&array![[0.0]], &head, &store);
        assert!((w[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((w[[0, 1]] - 0.25).abs() < 1e-12);
        assert!((w[[0, 2]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = AttentionHead::new(&mut store, 6, &mut rng);
        let f = crate::params::normal(&mut rng, 2.0, (10, 6));
        let w = compute_attention(&f, &head, &store);
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn weight_cam_cases() {
        let a = array![[2.0, 4.0], [1.0, -1.0]];
        let ones = Array2::ones((2, 3));
        assert_eq!(weight_cam(&a, &ones, Branch::Context), a);
        assert_eq!(weight_cam(&a, &Array2::zeros((2, 3)), Branch::Instance), Array2::<f64>::zeros((2, 2)));
        let w = array![[0.5, 0.25, 0.25], [0.0, 0.0, 1.0]];
        assert_eq!(weight_cam(&a, &w, Branch::Instance).row(0), array![1.0, 2.0]);
    }

    #[test]
    fn topk_pool_cases() {
        assert_eq!(topk_count(1, 8), 1);
        assert_eq!(topk_count(75, 8), 9);
        // T=1: logits are the row
        let p = topk_pool(&array![[1.0, 0.0]], 8);
        let e = crate::autograd::softmax_rows(&array![[1.0, 0.0]]);
        assert_eq!(p, e.row(0));
        // column [3,1,2], k=2 → 2.5
        let mut g = Graph::new();
        let a = g.constant(array![[3.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        let m = g.topk_mean_cols(a, 2);
        assert_eq!(g.value(m)[[0, 0]], 2.5);
        // k = T → column means
        let cam = array![[1.0, 4.0], [3.0, 0.0]];
        let p = topk_pool(&cam, 1);
        let e = crate::autograd::softmax_rows(&array![[2.0, 2.0]]);
        assert!((p[0] - e[[0, 0]]).abs() < 1e-15);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_pool_is_time_permutation_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let cam = crate::params::normal(&mut rng, 1.0, (16, 4));
        let mut perm: Vec<usize> = (0..16).collect();
        perm.reverse();
        perm.swap(3, 9);
        let shuffled = cam.select(ndarray::Axis(0), &perm);
        assert_eq!(topk_pool(&cam, 4), topk_pool(&shuffled, 4));
    }

    #[test]
    fn classification_loss_cases() {
        let ln2 = 2f64.ln();
        assert_eq!(classification_loss(&array![1.0, 0.0], &[1], Branch::Instance).unwrap(), 0.0);
        assert!((classification_loss(&array![0.5, 0.5], &[1], Branch::Instance).unwrap() - ln2).abs() < 1e-12);
        assert_eq!(branch_target(&[1], Branch::Context).unwrap(), array![0.5, 0.5]);
        assert!((classification_loss(&array![0.5, 0.5], &[1], Branch::Context).unwrap() - ln2).abs() < 1e-12);
        assert_eq!(branch_target(&[1, 1, 0], Branch::Background).unwrap(), array![0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(classification_loss(&array![0.5, 0.5], &[0], Branch::Instance), Err(Error::Config(_))));
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let probs = array![[0.2, 0.3, 0.5]];
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let l = classification_loss_node(&mut g, p, &[1, 1], Branch::Context).unwrap();
        let plain = classification_loss(&probs.row(0).to_owned(), &[1, 1], Branch::Context).unwrap();
        assert_eq!(g.scalar(l), plain);
    }
}

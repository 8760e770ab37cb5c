//! KL-divergence uncertainty and uncertainty-weighted pseudo-label supervision.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    /// Weight of the variance regularizer.
    pub rho: f64,
    /// Probability clamp inside logarithms.
    pub eps: f64,
    /// Stop gradients from flowing into the pseudo TCAM.
    pub detach_target: bool,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { rho: 0.001, eps: 1e-8, detach_target: false }
    }
}

/// Per-segment `KL(p ‖ p̂)` between class softmaxes of `cam` and `pseudo`; T×1.
pub fn uncertainty_node(g: &mut Graph, cam: NodeId, pseudo: NodeId, eps: f64) -> NodeId {
    let p = g.softmax_rows(cam);
    let ph = g.softmax_rows(pseudo);
    let lp = g.ln_clamped(p, eps);
    let lph = g.ln_clamped(ph, eps);
    let diff = g.sub(lp, lph);
    let prod = g.mul(p, diff);
    g.sum_rows(prod)
}

/// `(1/T)·Σ_t [exp(−D_t)·CE(p_t, p̂_t) + ρ·D_t]` with the pseudo row as the
/// target of the cross-entropy. The weight `exp(−D_t)` is a constant for
/// differentiation; the regularizer carries gradient.
pub fn pseudo_loss_node(g: &mut Graph, cam: NodeId, pseudo: NodeId, cfg: &PseudoConfig) -> NodeId {
    let target = if cfg.detach_target { g.detach(pseudo) } else { pseudo };
    let d = uncertainty_node(g, cam, target, cfg.eps);
    let weight = g.value(d).mapv(|v| (-v).exp());
    weighted_pseudo_loss(g, cam, target, d, weight, cfg)
}

/// [`pseudo_loss_node`] with the T×1 segment weights supplied by the caller.
/// Finite-difference checks use this to hold the weights at their base value.
pub fn pseudo_loss_node_frozen(g: &mut Graph, cam: NodeId, pseudo: NodeId, weight: Array2<f64>, cfg: &PseudoConfig) -> NodeId {
    let target = if cfg.detach_target { g.detach(pseudo) } else { pseudo };
    let d = uncertainty_node(g, cam, target, cfg.eps);
    weighted_pseudo_loss(g, cam, target, d, weight, cfg)
}

fn weighted_pseudo_loss(g: &mut Graph, cam: NodeId, target: NodeId, d: NodeId, weight: Array2<f64>, cfg: &PseudoConfig) -> NodeId {
    assert_eq!(weight.dim(), g.shape(d));
    let weight = g.constant(weight);
    let p = g.softmax_rows(cam);
    let ph = g.softmax_rows(target);
    let lp = g.ln_clamped(p, cfg.eps);
    let prod = g.mul(ph, lp);
    let ce = g.sum_rows(prod);
    let ce = g.scale(ce, -1.0);

    let weighted = g.mul(weight, ce);
    let reg = g.scale(d, cfg.rho);
    let per_segment = g.add(weighted, reg);
    g.mean_all(per_segment)
}

pub fn uncertainty(cam: &Array2<f64>, pseudo: &Array2<f64>, eps: f64) -> Array1<f64> {
    assert_eq!(cam.dim(), pseudo.dim());
    let mut g = Graph::new();
    let a = g.constant(cam.clone());
    let b = g.constant(pseudo.clone());
    let d = uncertainty_node(&mut g, a, b, eps);
    g.value(d).column(0).to_owned()
}

pub fn pseudo_loss(cam: &Array2<f64>, pseudo: &Array2<f64>, cfg: &PseudoConfig) -> f64 {
    assert_eq!(cam.dim(), pseudo.dim());
    let mut g = Graph::new();
    let a = g.constant(cam.clone());
    let b = g.constant(pseudo.clone());
    let l = pseudo_loss_node(&mut g, a, b, cfg);
    g.scalar(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_rows_have_zero_uncertainty() {
        let a = array![[0.3, -1.0, 2.0], [0.0, 0.0, 0.0]];
        assert!(uncertainty(&a, &a, 1e-8).iter().all(|&d| d.abs() <= 1e-12));
    }

    #[test]
    fn hand_kl_and_loss() {
        // softmax([0,0]) = [.5,.5]; softmax([0, ln 3]) = [.25,.75]
        let a = array![[0.0, 0.0]];
        let ah = array![[0.0, 3f64.ln()]];
        let d = uncertainty(&a, &ah, 1e-8)[0];
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((d - expect).abs() < 1e-12);
        assert!((d - 0.1438).abs() < 1e-4);
        let l = pseudo_loss(&a, &ah, &PseudoConfig::default());
        assert!((l - 0.6004).abs() < 1e-3, "{l}");
    }

    #[test]
    fn perfect_one_hot_agreement_is_free() {
        let a = array![[60.0, 0.0, 0.0]];
        assert!(pseudo_loss(&a, &a, &PseudoConfig::default()) < 1e-20);
    }

    #[test]
    fn rho_zero_is_weighted_cross_entropy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-2.0..2.0));
        let ah = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-2.0..2.0));
        let cfg = PseudoConfig { rho: 0.0, ..Default::default() };
        let d = uncertainty(&a, &ah, 1e-8);
        let p = crate::autograd::softmax_rows(&a);
        let ph = crate::autograd::softmax_rows(&ah);
        let mut expect = 0.0;
        for t in 0..4 {
            let ce: f64 = -(0..3).map(|c| ph[[t, c]] * p[[t, c]].ln()).sum::<f64>();
            expect += (-d[t]).exp() * ce;
        }
        expect /= 4.0;
        assert!((pseudo_loss(&a, &ah, &cfg) - expect).abs() < 1e-12);
    }

    #[test]
    fn gibbs_and_weight_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-5.0..5.0));
            let ah = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-5.0..5.0));
            for d in uncertainty(&a, &ah, 1e-8) {
                assert!(d >= -1e-15);
                let w = (-d).exp();
                assert!(w > 0.0 && w <= 1.0);
            }
            assert!(pseudo_loss(&a, &ah, &PseudoConfig::default()) >= 0.0);
        }
    }

    #[test]
    fn weight_is_gradient_stopped() {
        // with rho = 0 the gradient w.r.t. the main CAM must equal that of
        // the weighted cross-entropy with the weight frozen
        let a0 = array![[0.2, -0.4, 1.0]];
        let ah0 = array![[1.0, 0.5, -0.3]];
        let cfg = PseudoConfig { rho: 0.0, ..Default::default() };
        let mut g = Graph::new();
        let a = g.variable(a0.clone());
        let ah = g.constant(ah0.clone());
        let l = pseudo_loss_node(&mut g, a, ah, &cfg);
        let grads = g.backward(l);
        let w = (-uncertainty(&a0, &ah0, 1e-8)[0]).exp();
        let p = crate::autograd::softmax_rows(&a0);
        let ph = crate::autograd::softmax_rows(&ah0);
        // d/da of -Σ ph log softmax(a) = p - ph (ph sums to 1)
        let expect = (&p - &ph) * w;
        for (x, y) in grads.get(a).unwrap().iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_pseudo_gradient() {
        let cfg = PseudoConfig { detach_target: true, ..Default::default() };
        let mut g = Graph::new();
        let a = g.variable(array![[0.2, -0.4]]);
        let ah = g.variable(array![[1.0, 0.5]]);
        let l = pseudo_loss_node(&mut g, a, ah, &cfg);
        let grads = g.backward(l);
        assert!(grads.get(ah).is_none());
        assert!(grads.get(a).is_some());
    }
}

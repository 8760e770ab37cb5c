//! Noise-tolerant memory-guided contrastive loss.
//!
//! For a representative feature `β` with positives `P` and negatives `N`
//! (all unit-norm, so inner products are cosine similarities):
//!
//! ```text
//! L = −Σ_{r⁺} (1/q)·exp(q·⟨β,r⁺⟩/τ)
//!     + Σ_{r⁺} (1/q)·[λ·(exp(⟨β,r⁺⟩/τ) + Σ_{r⁻} exp(⟨β,r⁻⟩/τ))]^q
//! ```
//!
//! The bracket is evaluated in the log domain as
//! `exp(q·(ln λ + logaddexp(s⁺/τ, logsumexp(s⁻/τ))))`.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};

pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    /// Density weight in (0, 1].
    pub lambda: f64,
    /// Robustness exponent in (0, 1].
    pub q_rob: f64,
    /// Temperature.
    pub tau: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self { lambda: 0.5, q_rob: 0.2, tau: 0.07 }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0,1], got {}", self.lambda)));
        }
        if !(self.q_rob > 0.0 && self.q_rob <= 1.0) {
            return Err(Error::Config(format!("q_rob must lie in (0,1], got {}", self.q_rob)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_unit_rows(m: &Array2<f64>, what: &str) -> Result<()> {
    for (i, r) in m.rows().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Contract(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Contrastive loss for a 1×D unit-norm `beta` node. Gradient flows to `beta` only.
pub fn contrastive_loss_node(
    g: &mut Graph,
    beta: NodeId,
    positives: &Arc<Array2<f64>>,
    negatives: &Arc<Array2<f64>>,
    cfg: &ContrastConfig,
) -> Result<NodeId> {
    if positives.nrows() == 0 {
        return Err(Error::Contract("contrastive loss needs at least one positive".into()));
    }
    check_unit_rows(g.value(beta), "query")?;
    check_unit_rows(positives, "positive")?;
    check_unit_rows(negatives, "negative")?;
    let q = cfg.q_rob;
    let inv_tau = 1.0 / cfg.tau;

    let s_pos = g.const_right_matmul_t(beta, positives.clone());
    let z_pos = g.scale(s_pos, inv_tau);

    let qz = g.scale(z_pos, q);
    let e = g.exp(qz);
    let attract = g.sum_all(e);
    let attract = g.scale(attract, -1.0 / q);

    let z_col = g.transpose(z_pos);
    let lse = if negatives.nrows() > 0 {
        let s_neg = g.const_right_matmul_t(beta, negatives.clone());
        let z_neg = g.scale(s_neg, inv_tau);
        let lse_neg = g.logsumexp_rows(z_neg);
        let lse_b = g.broadcast_rows(lse_neg, positives.nrows());
        let pair = g.concat_cols(&[z_col, lse_b]);
        g.logsumexp_rows(pair)
    } else {
        z_col
    };
    let shifted = g.add_scalar(lse, cfg.lambda.ln());
    let powered = g.scale(shifted, q);
    let bracket = g.exp(powered);
    let repel = g.sum_all(bracket);
    let repel = g.scale(repel, 1.0 / q);
    Ok(g.add(attract, repel))
}

/// Plain-value evaluation of the contrastive loss.
pub fn contrastive_loss(
    beta: &Array1<f64>,
    positives: &Array2<f64>,
    negatives: &Array2<f64>,
    cfg: &ContrastConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.constant(beta.clone().insert_axis(ndarray::Axis(0)));
    let l = contrastive_loss_node(&mut g, b, &Arc::new(positives.clone()), &Arc::new(negatives.clone()), cfg)?;
    Ok(g.scalar(l))
}

/// Loss expressed directly through similarities, evaluated in the log domain.
/// Useful for probing monotonicity without constructing unit vectors.
pub fn loss_from_similarities(pos: &[f64], neg: &[f64], cfg: &ContrastConfig) -> f64 {
    let q = cfg.q_rob;
    let tau = cfg.tau;
    let lse_neg = if neg.is_empty() {
        f64::NEG_INFINITY
    } else {
        let m = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        m + neg.iter().map(|s| (s / tau - m).exp()).sum::<f64>().ln()
    };
    pos.iter()
        .map(|&s| {
            let z = s / tau;
            let hi = z.max(lse_neg);
            let lse = if hi == f64::NEG_INFINITY { hi } else { hi + ((z - hi).exp() + (lse_neg - hi).exp()).ln() };
            -(q * z).exp() / q + (q * (cfg.lambda.ln() + lse)).exp() / q
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn cfg(lambda: f64, q: f64, tau: f64) -> ContrastConfig {
        ContrastConfig { lambda, q_rob: q, tau }
    }

    fn unit(v: Array1<f64>) -> Array1<f64> {
        let n = v.dot(&v).sqrt();
        v / n
    }

    /// Literal evaluation without log-domain tricks.
    fn direct(beta: &Array1<f64>, pos: &Array2<f64>, neg: &Array2<f64>, c: &ContrastConfig) -> f64 {
        let neg_sum: f64 = neg.rows().into_iter().map(|r| (beta.dot(&r) / c.tau).exp()).sum();
        pos.rows()
            .into_iter()
            .map(|r| {
                let s = beta.dot(&r);
                -(c.q_rob * s / c.tau).exp() / c.q_rob
                    + (c.lambda * ((s / c.tau).exp() + neg_sum)).powf(c.q_rob) / c.q_rob
            })
            .sum()
    }

    #[test]
    fn symmetric_zero_case() {
        let b = array![0.6, 0.8];
        let p = array![[1.0, 0.0]];
        let l = contrastive_loss(&b, &p, &Array2::zeros((0, 2)), &cfg(1.0, 1.0, 0.07)).unwrap();
        assert!(l.abs() <= 1e-9, "{l}");
    }

    #[test]
    fn hand_values() {
        // orthogonal unit vectors give similarity 0
        let b = array![1.0, 0.0];
        let p = array![[0.0, 1.0]];
        let n = array![[0.0, -1.0]];
        let l = contrastive_loss(&b, &p, &n, &cfg(0.5, 1.0, 1.0)).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
        let l = contrastive_loss(&b, &p, &Array2::zeros((0, 2)), &cfg(0.5, 0.5, 1.0)).unwrap();
        assert!((l - (-2.0 + 2.0 * 0.5f64.sqrt())).abs() < 1e-12, "{l}");
    }

    #[test]
    fn rejects_unnormalized_inputs() {
        let r = contrastive_loss(&array![2.0, 0.0], &array![[1.0, 0.0]], &Array2::zeros((0, 2)), &cfg(0.5, 0.2, 0.07));
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = contrastive_loss(&array![1.0, 0.0], &array![[0.5, 0.0]], &Array2::zeros((0, 2)), &cfg(0.5, 0.2, 0.07));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    fn random_instance(rng: &mut impl Rng, d: usize, np: usize, nn: usize) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
        let mut row = || unit(Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0)));
        let b = row();
        let mut p = Array2::zeros((np, d));
        for mut r in p.rows_mut() {
            r.assign(&row());
        }
        let mut n = Array2::zeros((nn, d));
        for mut r in n.rows_mut() {
            r.assign(&row());
        }
        (b, p, n)
    }

    #[test]
    fn log_domain_matches_direct() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for i in 0..200 {
            let (b, p, n) = random_instance(&mut rng, 8, 1 + i % 5, i % 7);
            let c = cfg(rng.random_range(0.05..=1.0), rng.random_range(0.05..=1.0), rng.random_range(0.1..1.0));
            let fast = contrastive_loss(&b, &p, &n, &c).unwrap();
            let slow = direct(&b, &p, &n, &c);
            assert!((fast - slow).abs() <= 1e-9 * (1.0 + slow.abs()), "{fast} vs {slow}");
            let via_sims = loss_from_similarities(
                &p.rows().into_iter().map(|r| b.dot(&r)).collect::<Vec<_>>(),
                &n.rows().into_iter().map(|r| b.dot(&r)).collect::<Vec<_>>(),
                &c,
            );
            assert!((fast - via_sims).abs() <= 1e-9 * (1.0 + slow.abs()));
        }
    }

    #[test]
    fn raising_negative_similarity_never_lowers_loss() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let h = 1e-6;
        for _ in 0..500 {
            let pos: Vec<f64> = (0..rng.random_range(1..5)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut neg: Vec<f64> = (0..rng.random_range(1..6)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = cfg(rng.random_range(0.05..=1.0), rng.random_range(0.05..=1.0), rng.random_range(0.05..1.0));
            let j = rng.random_range(0..neg.len());
            let base = neg[j];
            neg[j] = base + h;
            let up = loss_from_similarities(&pos, &neg, &c);
            neg[j] = base - h;
            let down = loss_from_similarities(&pos, &neg, &c);
            assert!((up - down) / (2.0 * h) >= -1e-7);
        }
    }

    #[test]
    fn decreasing_in_positive_similarity_at_q_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..500 {
            let mut pos: Vec<f64> = (0..rng.random_range(1..5)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let neg: Vec<f64> = (0..rng.random_range(0..6)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = cfg(rng.random_range(0.05..0.99), 1.0, rng.random_range(0.05..1.0));
            let i = rng.random_range(0..pos.len());
            let base = pos[i];
            pos[i] = base + h;
            let up = loss_from_similarities(&pos, &neg, &c);
            pos[i] = base - h;
            let down = loss_from_similarities(&pos, &neg, &c);
            assert!(up < down, "not strictly decreasing");
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let (b, p, n) = random_instance(&mut rng, 6, 4, 5);
        let c = ContrastConfig::default();
        let base = contrastive_loss(&b, &p, &n, &c).unwrap();
        let pp = p.select(ndarray::Axis(0), &[2, 0, 3, 1]);
        let nn = n.select(ndarray::Axis(0), &[4, 3, 0, 2, 1]);
        let perm = contrastive_loss(&b, &pp, &nn, &c).unwrap();
        assert!((base - perm).abs() <= 1e-12 * base.abs().max(1.0));
    }
}

//! Temporal convolution embedding with rectification.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::params::{kaiming, ParamId, ParamStore};

/// Same-length 1-D convolution along time, zero padded.
///
/// The kernel is stored unrolled as a `(width·in) × out` matrix whose row
/// blocks are the taps from the earliest neighbour to the latest.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl TemporalConv {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        assert!(width % 2 == 1, "kernel width must be odd");
        let kernel = store.add(format!("{name}.kernel"), kaiming(rng, width * in_dim, (width * in_dim, out_dim)));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Self { kernel, bias, width, in_dim, out_dim }
    }

    /// Build from explicit taps, each `in × out`, ordered earliest neighbour first.
    pub fn from_taps(store: &mut ParamStore, name: &str, taps: &[Array2<f64>], bias: Array2<f64>) -> Self {
        assert!(taps.len() % 2 == 1);
        let views: Vec<_> = taps.iter().map(|t| t.view()).collect();
        let kernel = ndarray::concatenate(ndarray::Axis(0), &views).expect("taps share a shape");
        let (in_dim, out_dim) = taps[0].dim();
        let width = taps.len();
        let kernel = store.add(format!("{name}.kernel"), kernel);
        let bias = store.add(format!("{name}.bias"), bias);
        Self { kernel, bias, width, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let half = (self.width / 2) as isize;
        let taps: Vec<NodeId> = (0..self.width as isize)
            .map(|j| {
                let shift = half - j;
                if shift == 0 {
                    x
                } else {
                    g.shift_rows(x, shift)
                }
            })
            .collect();
        let cols = if taps.len() == 1 { taps[0] } else { g.concat_cols(&taps) };
        let w = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.matmul(cols, w);
        g.add_row(y, b)
    }
}

/// Stack of rectified temporal convolutions mapping backbone features to embeddings.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub layers: Vec<TemporalConv>,
}

impl Embedder {
    pub fn new(store: &mut ParamStore, in_dim: usize, dim: usize, depth: usize, rng: &mut impl Rng) -> Self {
        assert!(depth >= 1);
        let layers = (0..depth)
            .map(|i| TemporalConv::new(store, &format!("embed.{i}"), 3, if i == 0 { in_dim } else { dim }, dim, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        self.layers.iter().fold(x, |h, layer| {
            let y = layer.forward(g, store, h);
            g.relu(y)
        })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Embed a feature matrix outside of training.
pub fn embed(x: &Array2<f64>, embedder: &Embedder, store: &ParamStore) -> Array2<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let f = embedder.forward(&mut g, store, xn);
    g.value(f).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let e = Embedder::new(&mut store, 5, 4, 1, &mut rng);
        let f = embed(&Array2::zeros((6, 5)), &e, &store);
        assert_eq!(f, Array2::<f64>::zeros((6, 4)));
    }

    #[test]
    fn outputs_nonnegative_with_shape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let e = Embedder::new(&mut store, 3, 7, 2, &mut rng);
        let x = crate::params::normal(&mut rng, 1.0, (9, 3));
        let f = embed(&x, &e, &store);
        assert_eq!(f.dim(), (9, 7));
        assert!(f.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn hand_convolution() {
        let mut store = ParamStore::new();
        let zero = Array2::zeros((2, 1));
        let conv = TemporalConv::from_taps(&mut store, "c", &[zero.clone(), array![[1.0], [-1.0]], zero], Array2::zeros((1, 1)));
        let e = Embedder { layers: vec![conv] };
        assert_eq!(embed(&array![[3.0, 1.0]], &e, &store), array![[2.0]]);
    }

    #[test]
    fn edge_taps_read_neighbours() {
        let mut store = ParamStore::new();
        let conv = TemporalConv::from_taps(
            &mut store,
            "c",
            &[array![[1.0]], array![[0.0]], array![[10.0]]],
            Array2::zeros((1, 1)),
        );
        let e = Embedder { layers: vec![conv] };
        // out[t] = x[t-1] + 10 x[t+1]
        assert_eq!(embed(&array![[1.0], [2.0], [3.0]], &e, &store), array![[20.0], [31.0], [2.0]]);
    }
}

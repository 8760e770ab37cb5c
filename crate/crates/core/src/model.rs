//! Parameter layout of the full network and the main-branch forward pass.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Graph, NodeId};
use crate::config::ModelConfig;
use crate::embedder::Embedder;
use crate::error::Result;
use crate::evaluator::{mean_ap, EvalConfig, MapTable};
use crate::gksa::{Fusion, Summarizer};
use crate::heads::{topk_pool_node, weight_cam_node, AttentionHead, Branch, CamHead};
use crate::ingest::{GroundTruthSegment, VideoRecord};
use crate::localizer::{generate_proposals, nms, predict_video_classes, Detection, InferenceConfig};
use crate::params::ParamStore;

/// All trainable parameters. Every block is allocated regardless of which
/// components are enabled, so runs that differ only in toggles share their
/// initialization.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub embedder: Embedder,
    pub cam: CamHead,
    pub attention: AttentionHead,
    pub summarizer: Summarizer,
    pub fusion: Fusion,
    pub in_dim: usize,
    pub num_classes: usize,
    pub config: ModelConfig,
}

/// Nodes of the main branch for one video.
#[derive(Clone, Copy, Debug)]
pub struct MainBranch {
    pub features: NodeId,
    pub cam: NodeId,
    pub attention: NodeId,
    /// Attention-weighted TCAMs in [`Branch::ALL`] order.
    pub weighted: [NodeId; 3],
    /// 1×(C+1) video scores in [`Branch::ALL`] order.
    pub scores: [NodeId; 3],
}

/// Plain values of the main branch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub cam: Array2<f64>,
    pub attention: Array2<f64>,
    pub instance_cam: Array2<f64>,
    pub instance_scores: Array1<f64>,
}

impl Model {
    pub fn new(in_dim: usize, num_classes: usize, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dim = config.embed_dim;
        let embedder = Embedder::new(&mut store, in_dim, dim, config.embed_depth, &mut rng);
        let cam = CamHead::new(&mut store, dim, num_classes + 1, &mut rng);
        let attention = AttentionHead::new(&mut store, dim, &mut rng);
        let summarizer = Summarizer::new(&mut store, dim, &config.gksa, &mut rng);
        let fusion = Fusion::new(&mut store, dim, &mut rng);
        Self { store, embedder, cam, attention, summarizer, fusion, in_dim, num_classes, config: config.clone() }
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn main_branch(&self, g: &mut Graph, x: NodeId) -> MainBranch {
        let store = &self.store;
        let features = self.embedder.forward(g, store, x);
        let cam = self.cam.forward(g, store, features);
        let attention = self.attention.forward(g, store, features);
        let weighted = Branch::ALL.map(|b| weight_cam_node(g, cam, attention, b));
        let scores = weighted.map(|w| topk_pool_node(g, w, self.config.topk_ratio));
        MainBranch { features, cam, attention, weighted, scores }
    }

    pub fn predict(&self, features: &Array2<f64>) -> Prediction {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let m = self.main_branch(&mut g, x);
        Prediction {
            cam: g.value(m.cam).clone(),
            attention: g.value(m.attention).clone(),
            instance_cam: g.value(m.weighted[0]).clone(),
            instance_scores: g.value(m.scores[0]).row(0).to_owned(),
        }
    }

    /// Proposals for one video after class-wise NMS.
    pub fn localize(&self, video: &VideoRecord, cfg: &InferenceConfig) -> Vec<Detection> {
        let p = self.predict(&video.features);
        let classes = predict_video_classes(p.instance_scores.view(), cfg.class_threshold);
        let candidates = generate_proposals(&p.instance_cam, &classes, cfg, video.duration);
        nms(&candidates, cfg.nms_tiou)
            .into_iter()
            .map(|proposal| Detection { video_id: video.id.clone(), proposal })
            .collect()
    }

    /// Detections for a whole split, in video order.
    pub fn localize_all(&self, videos: &[VideoRecord], cfg: &InferenceConfig) -> Vec<Detection> {
        let per_video: Vec<Vec<Detection>> = videos.par_iter().map(|v| self.localize(v, cfg)).collect();
        per_video.into_iter().flatten().collect()
    }

    pub fn evaluate(
        &self,
        videos: &[VideoRecord],
        gt: &[GroundTruthSegment],
        inference: &InferenceConfig,
        eval: &EvalConfig,
    ) -> Result<MapTable> {
        let detections = self.localize_all(videos, inference);
        mean_ap(&detections, gt, self.num_classes, eval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig { embed_dim: 8, ..Default::default() };
        let a = Model::new(5, 3, &cfg, 9);
        let b = Model::new(5, 3, &cfg, 9);
        let c = Model::new(5, 3, &cfg, 10);
        let eq = |x: &Model, y: &Model| x.store.iter().zip(y.store.iter()).all(|(p, q)| p.1 == q.1 && p.2 == q.2);
        assert!(eq(&a, &b));
        assert!(!eq(&a, &c));
    }

    #[test]
    fn prediction_shapes_and_normalization() {
        let cfg = ModelConfig { embed_dim: 8, ..Default::default() };
        let m = Model::new(5, 3, &cfg, 1);
        let x = Array2::from_shape_fn((12, 5), |(t, d)| ((t * 7 + d) % 5) as f64 - 2.0);
        let p = m.predict(&x);
        assert_eq!(p.cam.dim(), (12, 4));
        assert_eq!(p.attention.dim(), (12, 3));
        assert!((p.instance_scores.sum() - 1.0).abs() < 1e-12);
        for r in p.attention.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let w = p.attention.column(0).to_owned().insert_axis(ndarray::Axis(1));
        assert_eq!(p.instance_cam, &p.cam * &w);
    }
}

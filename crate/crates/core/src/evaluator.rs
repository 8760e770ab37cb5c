//! Temporal IoU, per-class average precision and mAP over tIoU grids.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::GroundTruthSegment;
use crate::localizer::{Detection, Proposal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tiou_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tiou_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7] }
    }
}

impl EvalConfig {
    /// `[0.5:0.05:0.95]`
    pub fn coarse_to_strict() -> Self {
        Self { tiou_grid: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiou_grid.is_empty() {
            return Err(Error::Config("tIoU grid is empty".into()));
        }
        if self.tiou_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("tIoU thresholds must lie in (0,1]".into()));
        }
        if self.tiou_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("tIoU grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Intersection over union of two time intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Ranking order: higher confidence, then earlier start, then smaller class id.
pub fn rank_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.start.total_cmp(&b.start))
        .then(a.class_id.cmp(&b.class_id))
}

/// Average precision of one class at one threshold.
///
/// Returns `None` when there is neither ground truth nor a detection (the
/// class is skipped) and `Some(0.0)` for detections without ground truth.
pub fn average_precision(detections: &[Detection], gt: &[GroundTruthSegment], threshold: f64) -> Option<f64> {
    if gt.is_empty() {
        return if detections.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<&Detection> = detections.iter().filter(|d| d.proposal.confidence.is_finite()).collect();
    order.sort_by(|a, b| rank_order(&a.proposal, &b.proposal));
    let mut matched = vec![false; gt.len()];
    let mut tp = 0usize;
    let mut sum_precision = 0.0;
    for (rank, det) in order.iter().enumerate() {
        let span = (det.proposal.start, det.proposal.end);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if matched[j] || g.video_id != det.video_id {
                continue;
            }
            let iou = tiou(span, (g.start, g.end));
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
            tp += 1;
            sum_precision += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(sum_precision / gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapTable {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average: f64,
}

impl MapTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:>8}", "tIoU");
        for t in &self.thresholds {
            let _ = write!(s, " {:>6.2}", t);
        }
        let _ = writeln!(s, " {:>6}", "AVG");
        let _ = write!(s, "{:>8}", "mAP(%)");
        for m in &self.map {
            let _ = write!(s, " {:>6.2}", m * 100.0);
        }
        let _ = writeln!(s, " {:>6.2}", self.average * 100.0);
        s
    }

    /// One JSON record per threshold plus one for the average.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            let _ = writeln!(s, "{}", serde_json::json!({ "tiou": t, "map": m }));
        }
        let _ = writeln!(s, "{}", serde_json::json!({ "tiou": "avg", "map": self.average }));
        s
    }
}

/// mAP per threshold (mean over classes with ground truth) and the grid average.
pub fn mean_ap(detections: &[Detection], gt: &[GroundTruthSegment], num_classes: usize, cfg: &EvalConfig) -> Result<MapTable> {
    cfg.validate()?;
    if gt.is_empty() {
        return Err(Error::Eval("ground truth is empty".into()));
    }
    if let Some(g) = gt.iter().find(|g| g.class_id >= num_classes) {
        return Err(Error::Eval(format!("ground-truth class {} outside vocabulary of {num_classes}", g.class_id)));
    }
    let mut per_class_dets: Vec<Vec<Detection>> = vec![Vec::new(); num_classes];
    for d in detections {
        if d.proposal.class_id < num_classes {
            per_class_dets[d.proposal.class_id].push(d.clone());
        }
    }
    let mut per_class_gt: Vec<Vec<GroundTruthSegment>> = vec![Vec::new(); num_classes];
    for g in gt {
        per_class_gt[g.class_id].push(g.clone());
    }
    let map: Vec<f64> = cfg
        .tiou_grid
        .iter()
        .map(|&t| {
            let aps: Vec<f64> = (0..num_classes)
                .filter(|&c| !per_class_gt[c].is_empty())
                .filter_map(|c| average_precision(&per_class_dets[c], &per_class_gt[c], t))
                .collect();
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect();
    let average = map.iter().sum::<f64>() / map.len() as f64;
    Ok(MapTable { thresholds: cfg.tiou_grid.clone(), map, average })
}

//! Multi-threshold proposal generation and class-wise NMS.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{rank_order, tiou};
use crate::ingest::ClassList;
use crate::memory::min_max_normalize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub class_id: usize,
    pub confidence: f64,
    pub start: f64,
    pub end: f64,
}

/// A proposal tagged with the video it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub proposal: Proposal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub class_threshold: f64,
    pub act_thresholds: Vec<f64>,
    pub nms_tiou: f64,
    pub outer_margin: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            class_threshold: 0.2,
            act_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            nms_tiou: 0.45,
            outer_margin: 0.25,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.act_thresholds.is_empty() || self.act_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Config("activation thresholds must be nonempty and lie in (0,1)".into()));
        }
        if !(self.nms_tiou > 0.0 && self.nms_tiou < 1.0) {
            return Err(Error::Config(format!("NMS tIoU {} outside (0,1)", self.nms_tiou)));
        }
        if !(0.0..=1.0).contains(&self.class_threshold) {
            return Err(Error::Config(format!("class threshold {} outside [0,1]", self.class_threshold)));
        }
        if !(self.outer_margin >= 0.0) {
            return Err(Error::Config("outer margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Foreground classes whose video score reaches the threshold, falling back
/// to the single best foreground class. The last entry is background.
pub fn predict_video_classes(scores: ArrayView1<f64>, threshold: f64) -> Vec<usize> {
    let fg = scores.len().saturating_sub(1);
    let picked: Vec<usize> = (0..fg).filter(|&c| scores[c] >= threshold).collect();
    if !picked.is_empty() || fg == 0 {
        return picked;
    }
    let mut best = 0;
    for c in 1..fg {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    vec![best]
}

/// Maximal runs `[s, e)` with `scores > threshold`.
pub fn extract_runs(scores: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut open = None;
    for (i, &s) in scores.iter().enumerate() {
        match (s > threshold, open) {
            (true, None) => open = Some(i),
            (false, Some(b)) => {
                runs.push((b, i));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(b) = open {
        runs.push((b, scores.len()));
    }
    runs
}

/// Inner mean minus the mean over margins of `ceil(margin·len)` segments on
/// each side, clipped to the video.
pub fn outer_inner_contrast(column: &[f64], start: usize, end: usize, margin: f64) -> f64 {
    let len = end - start;
    let inner = column[start..end].iter().sum::<f64>() / len as f64;
    let m = (margin * len as f64).ceil() as usize;
    let left = start.saturating_sub(m)..start;
    let right = end..(end + m).min(column.len());
    let count = left.len() + right.len();
    if count == 0 {
        return inner;
    }
    let outer: f64 = column[left].iter().chain(&column[right]).sum::<f64>() / count as f64;
    inner - outer
}

/// Candidate proposals from the weighted instance TCAM of one video, before NMS.
pub fn generate_proposals(tcam: &Array2<f64>, classes: &[usize], cfg: &InferenceConfig, duration: f64) -> Vec<Proposal> {
    let t = tcam.nrows();
    let mut out = Vec::new();
    for &c in classes {
        let column: Vec<f64> = tcam.column(c).to_vec();
        let Some(norm) = min_max_normalize(tcam.column(c)) else {
            continue;
        };
        for &theta in &cfg.act_thresholds {
            for (s, e) in extract_runs(&norm, theta) {
                let confidence = outer_inner_contrast(&column, s, e, cfg.outer_margin);
                out.push(Proposal {
                    class_id: c,
                    confidence,
                    start: crate::ingest::segment_time(s, t, duration),
                    end: crate::ingest::segment_time(e, t, duration),
                });
            }
        }
    }
    out
}

/// Greedy class-wise NMS; proposals with non-finite confidence are dropped.
/// Output is sorted by descending confidence.
pub fn nms(proposals: &[Proposal], threshold: f64) -> Vec<Proposal> {
    let mut order: Vec<Proposal> = proposals.iter().copied().filter(|p| p.confidence.is_finite()).collect();
    order.sort_by(rank_order);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == p.class_id && tiou((k.start, k.end), (p.start, p.end)) > threshold);
        if !suppressed {
            kept.push(p);
        }
    }
    kept
}

pub fn write_proposals(path: &Path, detections: &[Detection], classes: &ClassList) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    for d in detections {
        let p = &d.proposal;
        w.write_record([
            d.video_id.clone(),
            classes.name(p.class_id).to_string(),
            p.start.to_string(),
            p.end.to_string(),
            p.confidence.to_string(),
        ])
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_proposals(path: &Path, classes: &ClassList) -> Result<Vec<Detection>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::ingest(path, e.to_string()))?;
        if rec.len() != 5 {
            return Err(Error::ingest(path, format!("line {}: expected 5 fields, found {}", i + 1, rec.len())));
        }
        let class_id = classes
            .id(&rec[1])
            .ok_or_else(|| Error::ingest(path, format!("line {}: unknown class {:?}", i + 1, &rec[1])))?;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::ingest(path, format!("line {}: bad number {:?}", i + 1, &rec[k])))
        };
        out.push(Detection {
            video_id: rec[0].to_string(),
            proposal: Proposal { class_id, confidence: num(4)?, start: num(2)?, end: num(3)? },
        });
    }
    Ok(out)
}

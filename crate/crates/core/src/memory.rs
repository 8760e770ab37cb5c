//! Class-wise representative features and the dataset-level momentum memory bank.
//!
//! The bank keeps one ring queue of `Q` rows per class, foreground classes
//! first and background last. A write blends the incoming feature into the
//! slot under the class cursor, `slot ← (1−α)·slot + α·β`, then advances the
//! cursor; a slot that has never been written is set to `β` directly.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Queue length per class.
    pub queue_len: usize,
    /// Momentum coefficient.
    pub alpha: f64,
    /// Confidence threshold on min-max normalized instance scores.
    pub zeta: f64,
    /// L2-normalize incoming features before they are written.
    pub normalize_writes: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { queue_len: 500, alpha: 0.99, zeta: 0.75, normalize_writes: true }
    }
}

/// Binary segment selection for one class of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMask {
    pub bits: Vec<bool>,
    /// The score column was constant, so nothing could be selected.
    pub degenerate: bool,
}

impl SegmentMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Strict threshold on already-normalized scores.
pub fn threshold_mask(normalized: &[f64], zeta: f64) -> Vec<bool> {
    normalized.iter().map(|&s| s > zeta).collect()
}

/// Min-max normalize a score column over the video.
/// Returns `None` for a constant column.
pub fn min_max_normalize(col: ndarray::ArrayView1<f64>) -> Option<Vec<f64>> {
    let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return None;
    }
    Some(col.iter().map(|&v| (v - min) / range).collect())
}

/// Select segments whose normalized class-`c` score exceeds `zeta`.
pub fn compute_mask(a_ins: &Array2<f64>, c: usize, zeta: f64) -> SegmentMask {
    match min_max_normalize(a_ins.column(c)) {
        Some(norm) => SegmentMask { bits: threshold_mask(&norm, zeta), degenerate: false },
        None => SegmentMask { bits: vec![false; a_ins.nrows()], degenerate: true },
    }
}

/// Mask-weighted mean of feature rows; `None` for an empty mask.
pub fn representative_feature(f: &Array2<f64>, mask: &SegmentMask) -> Option<Array1<f64>> {
    assert_eq!(f.nrows(), mask.bits.len());
    let n = mask.count();
    if n == 0 {
        return None;
    }
    let mut sum = Array1::zeros(f.ncols());
    for (row, _) in f.rows().into_iter().zip(&mask.bits).filter(|(_, &b)| b) {
        sum += &row;
    }
    Some(sum / n as f64)
}

/// Graph version of [`representative_feature`]: a 1×D node that carries gradient into `f`.
pub fn representative_node(g: &mut Graph, f: NodeId, mask: &SegmentMask) -> Option<NodeId> {
    let n = mask.count();
    if n == 0 {
        return None;
    }
    let w = Array2::from_shape_fn((1, mask.bits.len()), |(_, t)| if mask.bits[t] { 1.0 / n as f64 } else { 0.0 });
    let w = g.constant(w);
    Some(g.matmul(w, f))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub accepted: u64,
    /// Foreground writes rejected because the video is not labeled with the class.
    pub rejected: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Written { slot: usize },
    Rejected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub config: MemoryConfig,
    num_foreground: usize,
    dim: usize,
    rows: Vec<Array2<f64>>,
    cursor: Vec<usize>,
    fill: Vec<usize>,
    pub stats: FilterStats,
}

impl MemoryBank {
    pub fn new(num_foreground: usize, dim: usize, config: MemoryConfig) -> Self {
        assert!(config.queue_len >= 1);
        let q = config.queue_len;
        Self {
            num_foreground,
            dim,
            rows: (0..=num_foreground).map(|_| Array2::zeros((q, dim))).collect(),
            cursor: vec![0; num_foreground + 1],
            fill: vec![0; num_foreground + 1],
            config,
            stats: FilterStats::default(),
        }
    }

    /// Number of classes including background.
    pub fn num_slots_classes(&self) -> usize {
        self.num_foreground + 1
    }

    pub fn background_class(&self) -> usize {
        self.num_foreground
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self, c: usize) -> usize {
        self.fill[c]
    }

    pub fn cursor(&self, c: usize) -> usize {
        self.cursor[c]
    }

    pub fn total_filled(&self) -> usize {
        self.fill.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_filled() == 0
    }

    /// Raw queue storage for class `c` (`Q × D`, unfilled slots are zero).
    pub fn queue(&self, c: usize) -> &Array2<f64> {
        &self.rows[c]
    }

    /// Rebuild from stored parts.
    pub fn from_parts(
        num_foreground: usize,
        config: MemoryConfig,
        rows: Vec<Array2<f64>>,
        cursor: Vec<usize>,
        fill: Vec<usize>,
        stats: FilterStats,
    ) -> Self {
        let dim = rows[0].ncols();
        assert_eq!(rows.len(), num_foreground + 1);
        assert!(cursor.iter().all(|&c| c < config.queue_len));
        assert!(fill.iter().all(|&f| f <= config.queue_len));
        Self { config, num_foreground, dim, rows, cursor, fill, stats }
    }

    /// Write `beta` for class `c`, applying the weak-label filter to foreground classes.
    pub fn momentum_update(&mut self, c: usize, beta: &Array1<f64>, labels: &[u8]) -> UpdateOutcome {
        assert!(c <= self.num_foreground);
        assert_eq!(beta.len(), self.dim);
        if c < self.num_foreground && labels.get(c).copied().unwrap_or(0) == 0 {
            self.stats.rejected += 1;
            return UpdateOutcome::Rejected;
        }
        let incoming = if self.config.normalize_writes {
            let norm = beta.dot(beta).sqrt();
            if norm > 0.0 { beta / norm } else { beta.clone() }
        } else {
            beta.clone()
        };
        let q = self.config.queue_len;
        let slot = self.cursor[c];
        let mut row = self.rows[c].row_mut(slot);
        if slot >= self.fill[c] {
            row.assign(&incoming);
        } else {
            let a = self.config.alpha;
            ndarray::Zip::from(&mut row).and(&incoming).for_each(|m, &b| *m = (1.0 - a) * *m + a * b);
        }
        self.cursor[c] = (slot + 1) % q;
        self.fill[c] = (self.fill[c] + 1).min(q);
        self.stats.accepted += 1;
        UpdateOutcome::Written { slot }
    }

    /// Immutable, L2-normalized view of every filled row.
    pub fn snapshot(&self) -> BankSnapshot {
        let per_class: Vec<Arc<Array2<f64>>> = (0..=self.num_foreground)
            .map(|c| {
                let mut rows = self.rows[c].slice(ndarray::s![..self.fill[c], ..]).to_owned();
                for mut r in rows.rows_mut() {
                    let n = r.dot(&r).sqrt();
                    if n > 0.0 {
                        r /= n;
                    }
                }
                Arc::new(rows)
            })
            .collect();
        let negatives = (0..per_class.len())
            .map(|c| {
                let views: Vec<_> = per_class.iter().enumerate().filter(|(o, _)| *o != c).map(|(_, m)| m.view()).collect();
                Arc::new(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
            })
            .collect();
        let views: Vec<_> = per_class.iter().map(|m| m.view()).collect();
        let flat = Arc::new(ndarray::concatenate(Axis(0), &views).expect("equal widths"));
        BankSnapshot { per_class, negatives, flat }
    }
}

/// Read-only bank state taken at the start of a training step.
#[derive(Clone, Debug)]
pub struct BankSnapshot {
    per_class: Vec<Arc<Array2<f64>>>,
    negatives: Vec<Arc<Array2<f64>>>,
    flat: Arc<Array2<f64>>,
}

impl BankSnapshot {
    pub fn rows(&self, c: usize) -> &Arc<Array2<f64>> {
        &self.per_class[c]
    }

    /// Every filled row, class by class.
    pub fn flat(&self) -> &Arc<Array2<f64>> {
        &self.flat
    }

    pub fn is_empty(&self) -> bool {
        self.flat.nrows() == 0
    }

    /// Positives (same class) and negatives (every other class, background
    /// included) for class `c`; `None` when the class has no stored rows.
    pub fn build_pairs(&self, c: usize) -> Option<(Arc<Array2<f64>>, Arc<Array2<f64>>)> {
        if self.per_class[c].nrows() == 0 {
            return None;
        }
        Some((self.per_class[c].clone(), self.negatives[c].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn raw_cfg(q: usize, alpha: f64) -> MemoryConfig {
        MemoryConfig { queue_len: q, alpha, zeta: 0.75, normalize_writes: false }
    }

    #[test]
    fn threshold_cases() {
        assert_eq!(threshold_mask(&[0.8, 0.7, 0.9], 0.75), vec![true, false, true]);
        assert_eq!(threshold_mask(&[0.1, 0.75, 0.5], 0.75), vec![false, false, false]);
    }

    #[test]
    fn mask_normalizes_column() {
        let a = array![[0.0, 9.0], [3.5, 9.0], [4.0, 9.0]];
        let m = compute_mask(&a, 0, 0.75);
        assert_eq!(m.bits, vec![false, true, true]);
        assert!(!m.degenerate);
        // exact 0.75 after normalization is excluded
        let b = array![[0.0], [0.75], [1.0]];
        assert_eq!(compute_mask(&b, 0, 0.75).bits, vec![false, false, true]);
        let d = compute_mask(&a, 1, 0.75);
        assert!(d.degenerate && d.is_empty());
    }

    #[test]
    fn representative_cases() {
        let f = array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]];
        let all = SegmentMask { bits: vec![true; 3], degenerate: false };
        assert_eq!(representative_feature(&f, &all).unwrap(), array![3.0, 5.0]);
        let one = SegmentMask { bits: vec![false, true, false], degenerate: false };
        assert_eq!(representative_feature(&f, &one).unwrap(), array![3.0, 4.0]);
        let two = SegmentMask { bits: vec![true, true, false], degenerate: false };
        assert_eq!(representative_feature(&f, &two).unwrap(), array![2.0, 3.0]);
        let none = SegmentMask { bits: vec![false; 3], degenerate: false };
        assert!(representative_feature(&f, &none).is_none());
    }

    #[test]
    fn momentum_algebra() {
        // α=1 → replacement
        let mut bank = MemoryBank::new(1, 2, raw_cfg(1, 1.0));
        bank.momentum_update(0, &array![1.0, 2.0], &[1]);
        bank.momentum_update(0, &array![5.0, 6.0], &[1]);
        assert_eq!(bank.queue(0).row(0), array![5.0, 6.0]);

        // α=0 → filled slot unchanged
        let mut bank = MemoryBank::new(1, 2, raw_cfg(1, 0.0));
        bank.momentum_update(0, &array![1.0, 2.0], &[1]);
        bank.momentum_update(0, &array![5.0, 6.0], &[1]);
        assert_eq!(bank.queue(0).row(0), array![1.0, 2.0]);

        // α=0.99, filled zero slot, all-ones β → 0.99
        let mut bank = MemoryBank::new(1, 3, raw_cfg(1, 0.99));
        bank.momentum_update(0, &array![0.0, 0.0, 0.0], &[1]);
        bank.momentum_update(0, &array![1.0, 1.0, 1.0], &[1]);
        assert_eq!(bank.queue(0).row(0), array![0.99, 0.99, 0.99]);
    }

    #[test]
    fn first_write_copies_and_cursor_wraps() {
        let mut bank = MemoryBank::new(2, 1, raw_cfg(2, 0.5));
        assert_eq!(bank.momentum_update(1, &array![4.0], &[0, 1]), UpdateOutcome::Written { slot: 0 });
        assert_eq!(bank.queue(1).row(0), array![4.0]);
        bank.momentum_update(1, &array![2.0], &[0, 1]);
        assert_eq!(bank.fill(1), 2);
        assert_eq!(bank.cursor(1), 0);
        bank.momentum_update(1, &array![0.0], &[0, 1]);
        assert_eq!(bank.queue(1).row(0), array![2.0]);
        assert_eq!(bank.fill(1), 2);
    }

    #[test]
    fn label_filter_and_background() {
        let mut bank = MemoryBank::new(2, 1, raw_cfg(4, 0.5));
        assert_eq!(bank.momentum_update(0, &array![1.0], &[0, 1]), UpdateOutcome::Rejected);
        assert_eq!(bank.fill(0), 0);
        assert_eq!(bank.stats.rejected, 1);
        // background accepted regardless of labels
        assert!(matches!(bank.momentum_update(2, &array![1.0], &[0, 0]), UpdateOutcome::Written { .. }));
    }

    #[test]
    fn normalized_writes_have_unit_norm() {
        let mut bank = MemoryBank::new(1, 2, MemoryConfig { queue_len: 3, ..Default::default() });
        bank.momentum_update(0, &array![3.0, 4.0], &[1]);
        assert_eq!(bank.queue(0).row(0), array![0.6, 0.8]);
    }

    #[test]
    fn pairs_from_snapshot() {
        let mut bank = MemoryBank::new(2, 2, MemoryConfig { queue_len: 8, ..Default::default() });
        let labels = [1, 1];
        for _ in 0..3 {
            bank.momentum_update(0, &array![1.0, 0.0], &labels);
        }
        for _ in 0..2 {
            bank.momentum_update(1, &array![0.0, 1.0], &labels);
        }
        for _ in 0..4 {
            bank.momentum_update(2, &array![1.0, 1.0], &labels);
        }
        let snap = bank.snapshot();
        let (p, n) = snap.build_pairs(0).unwrap();
        assert_eq!((p.nrows(), n.nrows()), (3, 6));
        assert_eq!(snap.flat().nrows(), 9);

        let mut only = MemoryBank::new(2, 2, MemoryConfig::default());
        only.momentum_update(0, &array![1.0, 0.0], &labels);
        let snap = only.snapshot();
        assert_eq!(snap.build_pairs(0).unwrap().1.nrows(), 0);
        assert!(snap.build_pairs(1).is_none());
    }

    proptest! {
        // Every stored row stays inside the convex hull of the observed inputs:
        // replay against a reference that tracks explicit mixture weights.
        #[test]
        fn stored_rows_are_convex_combinations(
            q in 1usize..5,
            alpha in 0.0f64..=1.0,
            writes in proptest::collection::vec((0usize..2, -5.0f64..5.0, -5.0f64..5.0), 1..40),
        ) {
            let mut bank = MemoryBank::new(1, 2, raw_cfg(q, alpha));
            let mut observed: Vec<Array1<f64>> = Vec::new();
            // per class, per slot: weights over observed inputs
            let mut mix: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); q]; 2];
            let mut cursor = [0usize; 2];
            let mut fill = [0usize; 2];
            for (c, x, y) in writes {
                let beta = array![x, y];
                bank.momentum_update(c, &beta, &[1]);
                observed.push(beta);
                let k = observed.len();
                for slot in mix[c].iter_mut() {
                    slot.resize(k, 0.0);
                }
                let s = cursor[c];
                if s >= fill[c] {
                    mix[c][s] = vec![0.0; k];
                    mix[c][s][k - 1] = 1.0;
                } else {
                    for w in mix[c][s].iter_mut() {
                        *w *= 1.0 - alpha;
                    }
                    mix[c][s][k - 1] += alpha;
                }
                cursor[c] = (s + 1) % q;
                fill[c] = (fill[c] + 1).min(q);
            }
            for c in 0..2 {
                prop_assert_eq!(bank.fill(c), fill[c]);
                for s in 0..fill[c] {
                    let w = &mix[c][s];
                    let total: f64 = w.iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                    prop_assert!(w.iter().all(|&v| v >= 0.0));
                    let mut expect: Array1<f64> = Array1::zeros(2);
                    for (wi, o) in w.iter().zip(&observed) {
                        expect = expect + o * *wi;
                    }
                    let got = bank.queue(c).row(s);
                    prop_assert!((got[0] - expect[0]).abs() < 1e-9 && (got[1] - expect[1]).abs() < 1e-9);
                }
            }
        }
    }
}

//! Training loop: total objective, warm-up gating, batch steps, metric log
//! and checkpoints.
//!
//! A batch step reads one bank snapshot taken before the step. The summary
//! `T_M` is computed once per batch from that snapshot and enters every
//! per-video graph as a leaf; the per-video gradients with respect to that
//! leaf are summed and pushed back through the summary graph. Bank writes
//! are collected during the step and applied in batch order after the
//! optimizer update.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::config::{RunConfig, EFFECTIVE_CONFIG_FILE};
use crate::contrast::contrastive_loss_node;
use crate::error::{Error, Result};
use crate::gksa::{aggregate_const, aggregate_node};
use crate::heads::{classification_loss_node, topk_pool_node, weight_cam_node, Branch};
use crate::ingest::tensor_file::{decode, encode_f64};
use crate::ingest::{sample_segments, GroundTruthSegment, VideoRecord};
use crate::memory::{compute_mask, representative_feature, representative_node, BankSnapshot, FilterStats, MemoryBank};
use crate::model::Model;
use crate::params::Adam;
use crate::pseudo::pseudo_loss_node;

pub const CHECKPOINT_META: &str = "checkpoint.json";
pub const CHECKPOINT_TENSORS: &str = "tensors.wstf";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Loss components of one video or the mean over a batch/epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls_ins: f64,
    pub cls_con: f64,
    pub cls_back: f64,
    pub pseudo: f64,
    /// Video-level supervision of the auxiliary branch when aggregation runs
    /// without pseudo supervision.
    pub aux: f64,
    pub contrast: f64,
}

impl LossParts {
    pub fn cls(&self) -> f64 {
        self.cls_ins + self.cls_con + self.cls_back
    }

    fn accumulate(&mut self, o: &LossParts, w: f64) {
        self.cls_ins += w * o.cls_ins;
        self.cls_con += w * o.cls_con;
        self.cls_back += w * o.cls_back;
        self.pseudo += w * o.pseudo;
        self.aux += w * o.aux;
        self.contrast += w * o.contrast;
    }
}

/// `L_cls + γ·(L_ps + L_aux) + μ·L_cont`.
pub fn total_loss(parts: &LossParts, gamma: f64, mu: f64) -> f64 {
    parts.cls() + gamma * (parts.pseudo + parts.aux) + mu * parts.contrast
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub parts: LossParts,
    pub bank_rows: usize,
    pub writes_accepted: u64,
    pub writes_rejected: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<f64>,
}

/// Everything a run mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub bank: MemoryBank,
    pub summary: Option<Array2<f64>>,
    pub classes: Vec<String>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, in_dim: usize, classes: Vec<String>) -> Self {
        let model = Model::new(in_dim, classes.len(), &cfg.model, cfg.train.seed);
        let adam = Adam::new(&model.store);
        let bank = MemoryBank::new(classes.len(), cfg.model.embed_dim, cfg.memory.clone());
        Self { model, adam, bank, summary: None, classes, epoch: 0, step: 0, log: Vec::new() }
    }
}

/// Resample every video to the configured segment count.
pub fn prepare_videos(videos: Vec<VideoRecord>, segments: usize) -> Vec<VideoRecord> {
    videos
        .into_iter()
        .map(|mut v| {
            if v.features.nrows() != segments {
                v.features = sample_segments(&v.features, segments);
            }
            v
        })
        .collect()
}

struct BankWrite {
    class: usize,
    beta: Array1<f64>,
}

struct VideoOutcome {
    parts: LossParts,
    grads: Vec<(crate::params::ParamId, Array2<f64>)>,
    summary_grad: Option<Array2<f64>>,
    writes: Vec<BankWrite>,
}

/// Read-only inputs shared by every video of a batch.
struct StepInputs<'a> {
    cfg: &'a RunConfig,
    post_warmup: bool,
    snapshot: Option<&'a BankSnapshot>,
    summary: Option<&'a Array2<f64>>,
    epoch: usize,
    step: usize,
}

fn finite(value: f64, component: &str, inputs: &StepInputs) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { component: component.into(), epoch: inputs.epoch, step: inputs.step })
    }
}

fn video_step(model: &Model, video: &VideoRecord, inputs: &StepInputs) -> Result<VideoOutcome> {
    let cfg = inputs.cfg;
    let toggles = cfg.train.toggles;
    let store = &model.store;
    let labels = &video.labels;
    let c_fg = model.num_classes;

    let mut g = Graph::new();
    let x = g.constant(video.features.clone());
    let main = model.main_branch(&mut g, x);

    let mut parts = LossParts::default();
    let mut cls = Vec::with_capacity(3);
    for (i, b) in Branch::ALL.into_iter().enumerate() {
        let l = classification_loss_node(&mut g, main.scores[i], labels, b)?;
        let v = finite(g.scalar(l), &format!("classification ({})", b.name()), inputs)?;
        match b {
            Branch::Instance => parts.cls_ins = v,
            Branch::Context => parts.cls_con = v,
            Branch::Background => parts.cls_back = v,
        }
        cls.push(l);
    }
    let mut total = g.add(cls[0], cls[1]);
    total = g.add(total, cls[2]);

    let mut writes = Vec::new();
    if inputs.post_warmup && toggles.uses_bank() {
        let ins = g.value(main.weighted[Branch::Instance.column()]).clone();
        let back = g.value(main.weighted[Branch::Background.column()]).clone();
        let f_val = g.value(main.features).clone();
        let mut terms: Vec<NodeId> = Vec::new();
        for c in 0..=c_fg {
            let source = if c < c_fg { &ins } else { &back };
            let mask = compute_mask(source, c, cfg.memory.zeta);
            let Some(beta) = representative_feature(&f_val, &mask) else {
                continue;
            };
            if !(beta.dot(&beta) > 0.0) {
                continue;
            }
            writes.push(BankWrite { class: c, beta });
            let labeled = c == c_fg || labels[c] != 0;
            if !(toggles.rmgcl && labeled) {
                continue;
            }
            let Some((pos, neg)) = inputs.snapshot.and_then(|s| s.build_pairs(c)) else {
                continue;
            };
            let beta_node = representative_node(&mut g, main.features, &mask).expect("mask is non-empty");
            let beta_node = g.l2_normalize_rows(beta_node);
            terms.push(contrastive_loss_node(&mut g, beta_node, &pos, &neg, &cfg.contrast)?);
        }
        if !terms.is_empty() {
            let n = terms.len() as f64;
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = g.add(sum, t);
            }
            let l = g.scale(sum, 1.0 / n);
            parts.contrast = finite(g.scalar(l), "contrastive", inputs)?;
            let weighted = g.scale(l, cfg.train.mu);
            total = g.add(total, weighted);
        }
    }

    let mut summary_leaf = None;
    if inputs.post_warmup && toggles.auxiliary() {
        let enriched = if !toggles.gka {
            Some(main.features)
        } else if toggles.gks {
            inputs.summary.map(|s| {
                let leaf = g.variable(s.clone());
                summary_leaf = Some(leaf);
                aggregate_node(&mut g, main.features, leaf)
            })
        } else {
            inputs
                .snapshot
                .filter(|s| !s.is_empty())
                .map(|s| aggregate_const(&mut g, main.features, s.flat()))
        };
        if let Some(enriched) = enriched {
            let fused = model.fusion.forward(&mut g, store, enriched, main.features);
            let pseudo_cam = model.cam.forward(&mut g, store, fused);
            let l = if toggles.pseudo {
                let l = pseudo_loss_node(&mut g, main.cam, pseudo_cam, &cfg.pseudo);
                parts.pseudo = finite(g.scalar(l), "pseudo-label", inputs)?;
                l
            } else {
                let mut acc = None;
                for b in Branch::ALL {
                    let w = weight_cam_node(&mut g, pseudo_cam, main.attention, b);
                    let p = topk_pool_node(&mut g, w, model.config.topk_ratio);
                    let l = classification_loss_node(&mut g, p, labels, b)?;
                    acc = Some(match acc {
                        None => l,
                        Some(a) => g.add(a, l),
                    });
                }
                let l = acc.expect("three branches");
                parts.aux = finite(g.scalar(l), "auxiliary classification", inputs)?;
                l
            };
            let weighted = g.scale(l, cfg.train.gamma);
            total = g.add(total, weighted);
        }
    }

    finite(g.scalar(total), "total", inputs)?;
    let grads = g.backward(total);
    let summary_grad = summary_leaf.and_then(|leaf| grads.get(leaf).cloned());
    Ok(VideoOutcome { parts, grads: g.param_grads(&grads), summary_grad, writes })
}

/// One optimizer step on a batch. Returns the batch-mean loss parts.
pub fn train_batch(state: &mut TrainState, cfg: &RunConfig, batch: &[&VideoRecord], epoch: usize) -> Result<LossParts> {
    let toggles = cfg.train.toggles;
    let post_warmup = epoch >= cfg.train.warmup_epochs;
    let snapshot = (post_warmup && toggles.uses_bank()).then(|| state.bank.snapshot());

    let mut summary_graph = None;
    if post_warmup && toggles.gks && toggles.gka {
        if let Some(s) = snapshot.as_ref().filter(|s| !s.is_empty()) {
            let mut g = Graph::new();
            let nodes = state.model.summarizer.forward(&mut g, &state.model.store, s.flat());
            summary_graph = Some((g, nodes.summary));
        }
    }
    let summary_value = summary_graph.as_ref().map(|(g, n)| g.value(*n).clone());

    let inputs = StepInputs {
        cfg,
        post_warmup,
        snapshot: snapshot.as_ref(),
        summary: summary_value.as_ref(),
        epoch,
        step: state.step,
    };
    let model = &state.model;
    let outcomes: Vec<VideoOutcome> = batch.par_iter().map(|v| video_step(model, v, &inputs)).collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut grads = state.model.store.zeros_like();
    let mut summary_grad: Option<Array2<f64>> = None;
    let mut parts = LossParts::default();
    for o in &outcomes {
        parts.accumulate(&o.parts, scale);
        for (p, gr) in &o.grads {
            grads[p.index()].scaled_add(scale, gr);
        }
        if let Some(sg) = &o.summary_grad {
            match summary_grad.as_mut() {
                Some(acc) => acc.scaled_add(scale, sg),
                None => summary_grad = Some(sg * scale),
            }
        }
    }
    if let (Some((g, node)), Some(seed)) = (summary_graph.as_ref(), summary_grad) {
        let back = g.backward_with(*node, seed);
        for (p, gr) in g.param_grads(&back) {
            grads[p.index()] += &gr;
        }
    }

    state.adam.apply(&mut state.model.store, &grads, cfg.train.lr_at(epoch));
    state.step += 1;

    for (o, v) in outcomes.iter().zip(batch) {
        for w in &o.writes {
            state.bank.momentum_update(w.class, &w.beta, &v.labels);
        }
    }
    if summary_value.is_some() {
        state.summary = summary_value;
    }
    Ok(parts)
}

/// Held-out data for periodic evaluation.
pub struct HeldOut<'a> {
    pub videos: &'a [VideoRecord],
    pub ground_truth: &'a [GroundTruthSegment],
}

/// Run one epoch (shuffled batches) and append its record to the log.
pub fn train_epoch(state: &mut TrainState, cfg: &RunConfig, videos: &[VideoRecord], held_out: Option<&HeldOut>) -> Result<EpochRecord> {
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    let before = state.bank.stats;
    let mut parts = LossParts::default();
    for chunk in order.chunks(cfg.train.batch_size) {
        let batch: Vec<&VideoRecord> = chunk.iter().map(|&i| &videos[i]).collect();
        let p = train_batch(state, cfg, &batch, epoch)?;
        parts.accumulate(&p, chunk.len() as f64 / videos.len() as f64);
    }
    state.epoch += 1;
    let last = state.epoch == cfg.train.epochs;
    let due = cfg.train.eval_every > 0 && state.epoch % cfg.train.eval_every == 0;
    let map = match held_out {
        Some(h) if last || due => Some(state.model.evaluate(h.videos, h.ground_truth, &cfg.inference, &cfg.eval)?.average),
        _ => None,
    };
    let FilterStats { accepted, rejected } = state.bank.stats;
    let record = EpochRecord {
        epoch,
        lr: cfg.train.lr_at(epoch),
        loss: total_loss(&parts, cfg.train.gamma, cfg.train.mu),
        parts,
        bank_rows: state.bank.total_filled(),
        writes_accepted: accepted - before.accepted,
        writes_rejected: rejected - before.rejected,
        map,
    };
    state.log.push(record.clone());
    Ok(record)
}

/// Final summary for inference and checkpoints, recomputed from the final
/// bank and parameters. Kept unchanged when the bank is empty.
pub fn refresh_summary(state: &mut TrainState) {
    if state.bank.is_empty() {
        return;
    }
    let snap = state.bank.snapshot();
    state.summary = Some(state.model.summarizer.summarize(&state.model.store, snap.flat()));
}

/// Train from `state.epoch` to the configured number of epochs, writing the
/// metric log (and a final checkpoint) when `out` is given.
pub fn fit(
    state: &mut TrainState,
    cfg: &RunConfig,
    videos: &[VideoRecord],
    held_out: Option<&HeldOut>,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if let Some(dir) = out {
        cfg.persist(dir)?;
        fs::write(dir.join(METRICS_FILE), "")?;
    }
    while state.epoch < cfg.train.epochs {
        let record = train_epoch(state, cfg, videos, held_out)?;
        if let Some(dir) = out {
            let mut f = fs::OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        on_epoch(&record);
    }
    refresh_summary(state);
    if let Some(dir) = out {
        save_checkpoint(&dir.join("checkpoint"), state, cfg)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: u32,
    classes: Vec<String>,
    in_dim: usize,
    epoch: usize,
    step: usize,
    adam_step: u64,
    params: Vec<String>,
    bank_cursor: Vec<usize>,
    bank_fill: Vec<usize>,
    bank_stats: FilterStats,
    has_summary: bool,
}

/// Write parameters, optimizer moments, bank, summary, config and metric log.
pub fn save_checkpoint(dir: &Path, state: &TrainState, cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let store = &state.model.store;
    let nc = state.bank.num_slots_classes();
    let meta = CheckpointMeta {
        format: 1,
        classes: state.classes.clone(),
        in_dim: state.model.in_dim,
        epoch: state.epoch,
        step: state.step,
        adam_step: state.adam.step,
        params: store.iter().map(|(_, n, _)| n.to_string()).collect(),
        bank_cursor: (0..nc).map(|c| state.bank.cursor(c)).collect(),
        bank_fill: (0..nc).map(|c| state.bank.fill(c)).collect(),
        bank_stats: state.bank.stats,
        has_summary: state.summary.is_some(),
    };
    let mut bytes = Vec::new();
    for (_, _, v) in store.iter() {
        bytes.extend(encode_f64(v));
    }
    for m in state.adam.first.iter().chain(&state.adam.second) {
        bytes.extend(encode_f64(m));
    }
    for c in 0..nc {
        bytes.extend(encode_f64(state.bank.queue(c)));
    }
    if let Some(s) = &state.summary {
        bytes.extend(encode_f64(s));
    }
    fs::write(dir.join(CHECKPOINT_TENSORS), bytes)?;
    fs::write(dir.join(CHECKPOINT_META), serde_json::to_string_pretty(&meta)?)?;
    cfg.persist(dir)?;
    let mut log = String::new();
    for r in &state.log {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    fs::write(dir.join(METRICS_FILE), log)?;
    Ok(dir.to_path_buf())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, RunConfig)> {
    let missing = |what: &str| Error::Checkpoint(format!("{}: cannot read {what}", dir.display()));
    let cfg = RunConfig::load(&dir.join(EFFECTIVE_CONFIG_FILE))?;
    let meta_text = fs::read_to_string(dir.join(CHECKPOINT_META)).map_err(|_| missing(CHECKPOINT_META))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    let tensor_path = dir.join(CHECKPOINT_TENSORS);
    let bytes = fs::read(&tensor_path).map_err(|_| missing(CHECKPOINT_TENSORS))?;

    let mut state = TrainState::new(&cfg, meta.in_dim, meta.classes.clone());
    let names: Vec<String> = state.model.store.iter().map(|(_, n, _)| n.to_string()).collect();
    if names != meta.params {
        return Err(Error::Checkpoint("parameter layout does not match the stored configuration".into()));
    }
    let mut offset = 0usize;
    let mut next = |expect: (usize, usize)| -> Result<Array2<f64>> {
        let (m, used) = decode(&bytes[offset..], &tensor_path, offset as u64)?;
        if m.dim() != expect {
            return Err(Error::Checkpoint(format!("tensor at byte {offset} has shape {:?}, expected {expect:?}", m.dim())));
        }
        offset += used;
        Ok(m)
    };
    let ids: Vec<_> = state.model.store.ids().collect();
    for &id in &ids {
        let shape = state.model.store.get(id).dim();
        *state.model.store.get_mut(id) = next(shape)?;
    }
    for i in 0..ids.len() {
        let shape = state.adam.first[i].dim();
        state.adam.first[i] = next(shape)?;
    }
    for i in 0..ids.len() {
        let shape = state.adam.second[i].dim();
        state.adam.second[i] = next(shape)?;
    }
    state.adam.step = meta.adam_step;
    let nc = meta.classes.len() + 1;
    let mut rows = Vec::with_capacity(nc);
    for _ in 0..nc {
        rows.push(next((cfg.memory.queue_len, cfg.model.embed_dim))?);
    }
    if meta.bank_cursor.len() != nc || meta.bank_fill.len() != nc {
        return Err(Error::Checkpoint("bank cursor/fill length mismatch".into()));
    }
    if meta.bank_cursor.iter().chain(&meta.bank_fill).any(|&x| x > cfg.memory.queue_len)
        || meta.bank_cursor.iter().any(|&x| x >= cfg.memory.queue_len)
    {
        return Err(Error::Checkpoint("bank cursor/fill out of range".into()));
    }
    state.bank = MemoryBank::from_parts(meta.classes.len(), cfg.memory.clone(), rows, meta.bank_cursor, meta.bank_fill, meta.bank_stats);
    if meta.has_summary {
        state.summary = Some(next((cfg.model.gksa.num_codewords, cfg.model.embed_dim))?);
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes in {}", bytes.len() - offset, tensor_path.display())));
    }
    state.epoch = meta.epoch;
    state.step = meta.step;
    if let Ok(text) = fs::read_to_string(dir.join(METRICS_FILE)) {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            state.log.push(serde_json::from_str(line)?);
        }
    }
    Ok((state, cfg))
}

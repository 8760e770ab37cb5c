//! Run configuration: every tunable with its default, TOML loading and the
//! persisted effective copy.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrast::ContrastConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::gksa::GksaConfig;
use crate::localizer::InferenceConfig;
use crate::memory::MemoryConfig;
use crate::pseudo::PseudoConfig;

pub const EFFECTIVE_CONFIG_FILE: &str = "config.toml";

/// Which of the four cross-video components take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub rmgcl: bool,
    pub gks: bool,
    pub gka: bool,
    pub pseudo: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub fn all() -> Self {
        Self { rmgcl: true, gks: true, gka: true, pseudo: true }
    }

    pub fn none() -> Self {
        Self { rmgcl: false, gks: false, gka: false, pseudo: false }
    }

    /// The auxiliary branch runs when aggregation or pseudo supervision is on.
    pub fn auxiliary(&self) -> bool {
        self.gka || self.pseudo
    }

    /// The bank is written only when something reads it.
    pub fn uses_bank(&self) -> bool {
        self.rmgcl || self.gks || self.gka
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        match name {
            "rmgcl" => self.rmgcl = on,
            "gks" => self.gks = on,
            "gka" => self.gka = on,
            "pseudo" => self.pseudo = on,
            other => return Err(Error::Config(format!("unknown component {other:?}"))),
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [("rmgcl", self.rmgcl), ("gks", self.gks), ("gka", self.gka), ("pseudo", self.pseudo)]
            .iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        if names.is_empty() { "baseline".into() } else { names.join("+") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub gamma: f64,
    pub mu: f64,
    pub seed: u64,
    /// Segments per video after resampling.
    pub segments: usize,
    /// Held-out evaluation every this many epochs (0: only after the last one).
    pub eval_every: usize,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-4,
            lr_decay_every: 100,
            lr_decay: 0.1,
            batch_size: 16,
            warmup_epochs: 50,
            gamma: 1.0,
            mu: 0.1,
            seed: 0,
            segments: 75,
            eval_every: 0,
            toggles: Toggles::all(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = if self.lr_decay_every == 0 { 0 } else { epoch / self.lr_decay_every };
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.segments == 0 {
            return Err(Error::Config("epochs, batch size and segments must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warm-up ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) || self.gamma < 0.0 || self.mu < 0.0 {
            return Err(Error::Config("learning rate must be positive and loss weights non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub embed_depth: usize,
    pub topk_ratio: usize,
    pub gksa: GksaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { embed_dim: 64, embed_depth: 1, topk_ratio: 8, gksa: GksaConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub contrast: ContrastConfig,
    pub pseudo: PseudoConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Write the effective configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.contrast.validate()?;
        self.inference.validate()?;
        self.eval.validate()?;
        if self.memory.queue_len == 0 || !(0.0..=1.0).contains(&self.memory.alpha) || !(0.0..1.0).contains(&self.memory.zeta) {
            return Err(Error::Config("memory needs queue length ≥ 1, α in [0,1] and ζ in [0,1)".into()));
        }
        if self.pseudo.rho < 0.0 || !(self.pseudo.eps > 0.0) {
            return Err(Error::Config("pseudo loss needs ρ ≥ 0 and ε > 0".into()));
        }
        let m = &self.model;
        if m.embed_dim == 0 || m.embed_depth == 0 || m.topk_ratio == 0 || m.gksa.num_codewords == 0 || m.gksa.sparse_topk == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

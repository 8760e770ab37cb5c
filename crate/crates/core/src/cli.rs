//! Command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{RunConfig, Toggles};
use crate::evaluator::{mean_ap, EvalConfig, MapTable};
use crate::ingest::{load_ground_truth, load_manifest, ClassList, GroundTruthSegment, SyntheticSpec, VideoRecord, CLASSES_FILE};
use crate::localizer::{read_proposals, write_proposals};
use crate::report::{ablation_markdown, render_run, AblationRow, ABLATION_FILE, MAP_FILE};
use crate::trainer::{fit, load_checkpoint, prepare_videos, HeldOut, TrainState};

#[derive(Debug, Parser)]
#[command(name = "wstal", version, about = "Weakly supervised temporal action localization with cross-video context")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metric log and held-out mAP.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the mAP table from a checkpoint or from a proposal file.
    Evaluate(EvaluateArgs),
    /// Write the proposals of a checkpoint for every video of a manifest.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        nms_tiou: Option<f64>,
        #[arg(long)]
        class_thresh: Option<f64>,
        /// Proposal file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic dataset directory.
    SynthData(SynthArgs),
    /// Train and evaluate one model per component set with a shared seed.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: Overrides,
        /// Run all sixteen component subsets instead of the six standard rows.
        #[arg(long)]
        full_grid: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render tables and charts from the logs in a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Component {
    Rmgcl,
    Gks,
    Gka,
    Pseudo,
}

impl Component {
    fn name(self) -> &'static str {
        match self {
            Component::Rmgcl => "rmgcl",
            Component::Gks => "gks",
            Component::Gka => "gka",
            Component::Pseudo => "pseudo",
        }
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct DataArgs {
    /// Dataset directory holding `train.jsonl` and optionally `test.jsonl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
}

/// Configuration file plus per-field overrides; flags win over the file.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub q_rob: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub queue_len: Option<usize>,
    #[arg(long)]
    pub codewords: Option<usize>,
    #[arg(long)]
    pub topk_ratio: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, value_enum)]
    pub enable: Vec<Component>,
    #[arg(long, value_enum)]
    pub disable: Vec<Component>,
    #[arg(long)]
    pub nms_tiou: Option<f64>,
    #[arg(long)]
    pub class_thresh: Option<f64>,
}

impl Overrides {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(c.train.seed, self.seed);
        set!(c.train.epochs, self.epochs);
        set!(c.train.warmup_epochs, self.warmup);
        set!(c.train.batch_size, self.batch_size);
        set!(c.train.learning_rate, self.lr);
        set!(c.contrast.tau, self.tau);
        set!(c.contrast.lambda, self.lambda);
        set!(c.contrast.q_rob, self.q_rob);
        set!(c.memory.alpha, self.alpha);
        set!(c.memory.zeta, self.zeta);
        set!(c.memory.queue_len, self.queue_len);
        set!(c.model.gksa.num_codewords, self.codewords);
        set!(c.model.topk_ratio, self.topk_ratio);
        set!(c.pseudo.rho, self.rho);
        set!(c.train.gamma, self.gamma);
        set!(c.train.mu, self.mu);
        set!(c.inference.nms_tiou, self.nms_tiou);
        set!(c.inference.class_threshold, self.class_thresh);
        for comp in &self.enable {
            c.train.toggles.set(comp.name(), true)?;
        }
        for comp in &self.disable {
            c.train.toggles.set(comp.name(), false)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Manifest of the videos to localize (with a checkpoint).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Proposal file (video_id,class_name,start,end,confidence).
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    /// Ground-truth file; defaults to the one beside the manifest.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Class list; defaults to the checkpoint's or the one beside the ground truth.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// `start:step:end`, `thumos` (0.1:0.1:0.7) or `anet` (0.5:0.05:0.95).
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub nms_tiou: Option<f64>,
    #[arg(long)]
    pub class_thresh: Option<f64>,
    /// Directory for `map.txt` and `map.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub videos: usize,
    #[arg(long, default_value_t = 50)]
    pub test_videos: usize,
    #[arg(long, default_value_t = 75)]
    pub segments: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            num_videos: self.videos,
            num_test_videos: self.test_videos,
            segments: self.segments,
            feature_dim: self.dim,
            prototype_separation: self.separation,
            noise_scale: self.noise,
            seed: self.seed,
            ..SyntheticSpec::default()
        }
    }
}

/// Parse a tIoU grid specification.
pub fn parse_grid(spec: &str) -> anyhow::Result<EvalConfig> {
    let cfg = match spec {
        "thumos" => EvalConfig::default(),
        "anet" => EvalConfig::coarse_to_strict(),
        _ => {
            let parts: Vec<f64> = spec
                .split(':')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .with_context(|| format!("bad grid {spec:?}"))?;
            let [start, step, end] = parts[..] else {
                bail!("grid must be start:step:end, got {spec:?}");
            };
            if !(step > 0.0) {
                bail!("grid step must be positive");
            }
            let n = ((end - start) / step + 1e-9).floor() as usize;
            let tiou_grid = (0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect();
            EvalConfig { tiou_grid }
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Split {
    classes: ClassList,
    videos: Vec<VideoRecord>,
    ground_truth: Vec<GroundTruthSegment>,
}

fn load_split(manifest: &Path, segments: usize) -> anyhow::Result<Split> {
    let m = load_manifest(manifest)?;
    let videos = prepare_videos(m.load_records()?, segments);
    Ok(Split { classes: m.classes.clone(), videos, ground_truth: m.ground_truth.unwrap_or_default() })
}

fn manifests(data: &DataArgs, cfg: &RunConfig) -> anyhow::Result<(PathBuf, Option<PathBuf>)> {
    let from_dir = |name: &str| data.data.as_ref().map(|d| d.join(name));
    let train = data
        .train_manifest
        .clone()
        .or_else(|| from_dir("train.jsonl"))
        .or_else(|| cfg.data.train_manifest.clone())
        .context("no training data: pass --data DIR or --train-manifest FILE")?;
    let test = data
        .test_manifest
        .clone()
        .or_else(|| from_dir("test.jsonl").filter(|p| p.is_file()))
        .or_else(|| cfg.data.test_manifest.clone());
    Ok((train, test))
}

fn write_table(dir: &Path, table: &MapTable) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("map.txt"), table.to_text())?;
    fs::write(dir.join(MAP_FILE), table.to_jsonl())?;
    Ok(())
}

/// Train one configuration; returns the held-out table when a test split exists.
fn train_run(cfg: &RunConfig, train: &Split, test: Option<&Split>, out: &Path) -> anyhow::Result<Option<MapTable>> {
    if let Some(t) = test {
        if t.classes != train.classes {
            bail!("train and test manifests use different class lists");
        }
    }
    let in_dim = train.videos.first().context("training split is empty")?.features.ncols();
    let mut state = TrainState::new(cfg, in_dim, train.classes.names().to_vec());
    let held = test.filter(|t| !t.ground_truth.is_empty()).map(|t| HeldOut { videos: &t.videos, ground_truth: &t.ground_truth });
    let started = Instant::now();
    fit(&mut state, cfg, &train.videos, held.as_ref(), Some(out), |r| {
        let map = r.map.map(|m| format!(" mAP {:.2}", m * 100.0)).unwrap_or_default();
        println!("epoch {:>4} loss {:.4} cls {:.4} cont {:.4} ps {:.4}{map}", r.epoch, r.loss, r.parts.cls(), r.parts.contrast, r.parts.pseudo);
    })?;
    println!("trained {} epochs in {:.1}s", cfg.train.epochs, started.elapsed().as_secs_f64());
    match held {
        Some(h) => {
            let table = state.model.evaluate(h.videos, h.ground_truth, &cfg.inference, &cfg.eval)?;
            write_table(out, &table)?;
            print!("{}", table.to_text());
            Ok(Some(table))
        }
        None => Ok(None),
    }
}

const STANDARD_ROWS: [[bool; 4]; 6] = [
    [false, false, false, false],
    [true, false, false, false],
    [true, false, true, false],
    [true, false, true, true],
    [true, true, true, false],
    [true, true, true, true],
];

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { data, overrides, out } => {
            let cfg = overrides.resolve()?;
            let (train_path, test_path) = manifests(&data, &cfg)?;
            let train = load_split(&train_path, cfg.train.segments)?;
            let test = test_path.as_ref().map(|p| load_split(p, cfg.train.segments)).transpose()?;
            let mut cfg = cfg;
            cfg.data.train_manifest = Some(train_path);
            cfg.data.test_manifest = test_path;
            train_run(&cfg, &train, test.as_ref(), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate(args) => evaluate(&args)?,
        Command::Infer { checkpoint, manifest, nms_tiou, class_thresh, out } => {
            let (state, mut cfg) = load_checkpoint(&checkpoint)?;
            if let Some(v) = nms_tiou {
                cfg.inference.nms_tiou = v;
            }
            if let Some(v) = class_thresh {
                cfg.inference.class_threshold = v;
            }
            cfg.inference.validate()?;
            let split = load_split(&manifest, cfg.train.segments)?;
            if split.classes.names() != state.classes.as_slice() {
                bail!("manifest classes differ from the checkpoint's");
            }
            let dets = state.model.localize_all(&split.videos, &cfg.inference);
            write_proposals(&out, &dets, &split.classes)?;
            println!("wrote {} proposals for {} videos to {}", dets.len(), split.videos.len(), out.display());
        }
        Command::SynthData(args) => {
            let data = crate::ingest::generate_synthetic_dataset(&args.spec())?;
            data.write(&args.out)?;
            println!("wrote {} train / {} test videos to {}", data.train.len(), data.test.len(), args.out.display());
        }
        Command::Ablate { data, overrides, full_grid, out } => {
            let base = overrides.resolve()?;
            let (train_path, test_path) = manifests(&data, &base)?;
            let test_path = test_path.context("ablation needs a test split with ground truth")?;
            let train = load_split(&train_path, base.train.segments)?;
            let test = load_split(&test_path, base.train.segments)?;
            if test.ground_truth.is_empty() {
                bail!("test split has no ground truth");
            }
            let rows: Vec<[bool; 4]> = if full_grid {
                (0..16u8).map(|m| [m & 1 != 0, m & 2 != 0, m & 4 != 0, m & 8 != 0]).collect()
            } else {
                STANDARD_ROWS.to_vec()
            };
            fs::create_dir_all(&out)?;
            let mut results = Vec::new();
            for [rmgcl, gks, gka, pseudo] in rows {
                let mut cfg = base.clone();
                cfg.train.toggles = Toggles { rmgcl, gks, gka, pseudo };
                let label = cfg.train.toggles.label();
                println!("== {label}");
                let table = train_run(&cfg, &train, Some(&test), &out.join(&label))?.context("held-out evaluation missing")?;
                results.push(AblationRow { label, rmgcl, gks, gka, pseudo, table });
            }
            let mut jsonl = String::new();
            for r in &results {
                jsonl.push_str(&serde_json::to_string(r)?);
                jsonl.push('\n');
            }
            fs::write(out.join(ABLATION_FILE), jsonl)?;
            let md = ablation_markdown(&results);
            fs::write(out.join("ablation.md"), &md)?;
            print!("{md}");
        }
        Command::Report { run } => {
            for p in render_run(&run)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let eval = match &args.grid {
        Some(g) => Some(parse_grid(g)?),
        None => None,
    };
    let (table, eval_cfg) = if let Some(ckpt) = &args.checkpoint {
        let (state, mut cfg) = load_checkpoint(ckpt)?;
        if let Some(v) = args.nms_tiou {
            cfg.inference.nms_tiou = v;
        }
        if let Some(v) = args.class_thresh {
            cfg.inference.class_threshold = v;
        }
        cfg.inference.validate()?;
        let eval = eval.unwrap_or(cfg.eval.clone());
        let manifest = args.manifest.clone().or(cfg.data.test_manifest.clone()).context("pass --manifest for the videos to evaluate")?;
        let split = load_split(&manifest, cfg.train.segments)?;
        let gt = match &args.gt {
            Some(p) => load_ground_truth(p, &split.classes)?,
            None => split.ground_truth.clone(),
        };
        (state.model.evaluate(&split.videos, &gt, &cfg.inference, &eval)?, eval)
    } else {
        let proposals = args.proposals.as_ref().context("pass --checkpoint or --proposals")?;
        let gt_path = args.gt.as_ref().context("--proposals needs --gt")?;
        let classes_path = match &args.classes {
            Some(p) => p.clone(),
            None => gt_path.parent().unwrap_or(Path::new(".")).join(CLASSES_FILE),
        };
        let classes = ClassList::load(&classes_path)?;
        let dets = read_proposals(proposals, &classes)?;
        let gt = load_ground_truth(gt_path, &classes)?;
        let eval = eval.unwrap_or_default();
        (mean_ap(&dets, &gt, classes.len(), &eval)?, eval)
    };
    debug_assert_eq!(table.thresholds, eval_cfg.tiou_grid);
    print!("{}", table.to_text());
    if let Some(out) = &args.out {
        write_table(out, &table)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0.1:0.1:0.7").unwrap().tiou_grid, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
        assert_eq!(parse_grid("anet").unwrap().tiou_grid.len(), 10);
        assert_eq!(parse_grid("0.5:0.05:0.95").unwrap().tiou_grid.last(), Some(&0.95));
        assert!(parse_grid("0.1:0:0.7").is_err());
        assert!(parse_grid("a:b").is_err());
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[train]\nepochs = 9\nwarmup_epochs = 3\nseed = 4\n").unwrap();
        let cli = Cli::try_parse_from([
            "wstal", "train", "--out", "x", "--config", p.to_str().unwrap(), "--seed", "11", "--disable", "gks",
            "--disable", "pseudo", "--tau", "0.1",
        ])
        .unwrap();
        let Command::Train { overrides, .. } = cli.command else { panic!() };
        let c = overrides.resolve().unwrap();
        assert_eq!((c.train.epochs, c.train.warmup_epochs, c.train.seed), (9, 3, 11));
        assert_eq!(c.train.toggles, Toggles { rmgcl: true, gks: false, gka: true, pseudo: false });
        assert_eq!(c.contrast.tau, 0.1);
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["wstal", "train", "--out", "x", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["wstal", "train", "--out", "x", "--enable", "nope"]).is_err());
    }
}

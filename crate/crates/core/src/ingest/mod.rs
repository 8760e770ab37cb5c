//! Dataset ingestion: manifests, feature files, ground truth, resampling and
//! synthetic data.
//!
//! A dataset directory holds `classes.txt` (one class name per line), one or
//! more JSON-lines manifests (`train.jsonl`, `test.jsonl`), an optional
//! `ground_truth.csv` and the feature files the manifests reference.
//! Feature paths in a manifest are resolved relative to the manifest's
//! directory.

pub mod synthetic;
pub mod tensor_file;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic_dataset, SyntheticDataset, SyntheticSpec};
pub use tensor_file::{read_matrix as load_video_features, write_matrix_f32 as write_video_features};

pub const CLASSES_FILE: &str = "classes.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

/// Ordered class vocabulary; index = class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassList(Vec<String>);

impl ClassList {
    pub fn new(names: Vec<String>) -> Self {
        Self(names)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::ingest(path, format!("cannot read class list: {e}")))?;
        let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if names.is_empty() {
            return Err(Error::ingest(path, "class list is empty"));
        }
        Ok(Self(names))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for n in &self.0 {
            writeln!(f, "{n}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.0[id]
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: String,
    pub duration_sec: f64,
    pub labels: Vec<String>,
}

/// A manifest record resolved against the class list; features not yet loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDescriptor {
    pub id: String,
    pub feature_path: PathBuf,
    pub duration: f64,
    pub labels: Vec<u8>,
}

/// A video with its segment features.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub features: Array2<f64>,
    pub duration: f64,
    pub labels: Vec<u8>,
}

impl VideoRecord {
    pub fn num_segments(&self) -> usize {
        self.features.nrows()
    }

    pub fn label_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l != 0).map(|(c, _)| c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSegment {
    pub video_id: String,
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub classes: ClassList,
    pub videos: Vec<VideoDescriptor>,
    pub ground_truth: Option<Vec<GroundTruthSegment>>,
}

impl Manifest {
    /// Load every referenced feature file.
    pub fn load_records(&self) -> Result<Vec<VideoRecord>> {
        self.videos
            .iter()
            .map(|v| {
                let features = load_video_features(&v.feature_path)?;
                if features.nrows() == 0 || features.ncols() == 0 {
                    return Err(Error::ingest(&v.feature_path, "feature matrix is empty"));
                }
                if features.iter().any(|x| !x.is_finite()) {
                    return Err(Error::ingest(&v.feature_path, "non-finite feature entry"));
                }
                Ok(VideoRecord { id: v.id.clone(), features, duration: v.duration, labels: v.labels.clone() })
            })
            .collect()
    }
}

/// Load a manifest, the class list beside it and, when present, the ground
/// truth for the manifest's videos.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let classes = ClassList::load(&dir.join(CLASSES_FILE))?;
    let file = fs::File::open(path).map_err(|e| Error::ingest(path, format!("cannot open manifest: {e}")))?;
    let mut videos = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::ingest(path, format!("line {}: {e}", lineno + 1)))?;
        let mut labels = vec![0u8; classes.len()];
        for name in &entry.labels {
            let c = classes
                .id(name)
                .ok_or_else(|| Error::ingest(path, format!("line {}: unknown class {name:?}", lineno + 1)))?;
            labels[c] = 1;
        }
        let feature_path = dir.join(&entry.feature_path);
        if !feature_path.is_file() {
            return Err(Error::ingest(&feature_path, "referenced feature file does not exist"));
        }
        if !(entry.duration_sec > 0.0) {
            return Err(Error::ingest(path, format!("line {}: duration must be positive", lineno + 1)));
        }
        videos.push(VideoDescriptor { id: entry.id, feature_path, duration: entry.duration_sec, labels });
    }
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = if gt_path.is_file() {
        let all = load_ground_truth(&gt_path, &classes)?;
        Some(all.into_iter().filter(|g| videos.iter().any(|v| v.id == g.video_id)).collect())
    } else {
        None
    };
    Ok(Manifest { classes, videos, ground_truth })
}

/// Write a manifest for `records`, storing each video's features next to it
/// under `features/<id>.wstf`.
pub fn write_manifest(path: &Path, records: &[VideoRecord], classes: &ClassList) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir.join("features"))?;
    classes.save(&dir.join(CLASSES_FILE))?;
    let mut out = fs::File::create(path)?;
    for r in records {
        let rel = format!("features/{}.wstf", r.id);
        write_video_features(&dir.join(&rel), &r.features)?;
        let entry = ManifestEntry {
            id: r.id.clone(),
            feature_path: rel,
            duration_sec: r.duration,
            labels: r.label_classes().map(|c| classes.name(c).to_string()).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&entry)?)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct GtRow {
    video_id: String,
    class_name: String,
    start_sec: f64,
    end_sec: f64,
}

pub fn load_ground_truth(path: &Path, classes: &ClassList) -> Result<Vec<GroundTruthSegment>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: GtRow = row.map_err(|e| Error::ingest(path, e.to_string()))?;
        let class_id = classes
            .id(&row.class_name)
            .ok_or_else(|| Error::ingest(path, format!("unknown class {:?}", row.class_name)))?;
        if !(row.start_sec >= 0.0 && row.start_sec < row.end_sec) {
            return Err(Error::ingest(path, format!("invalid interval for {}", row.video_id)));
        }
        out.push(GroundTruthSegment { video_id: row.video_id, class_id, start: row.start_sec, end: row.end_sec });
    }
    Ok(out)
}

pub fn write_ground_truth(path: &Path, gt: &[GroundTruthSegment], classes: &ClassList) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    for g in gt {
        w.serialize(GtRow {
            video_id: g.video_id.clone(),
            class_name: classes.name(g.class_id).to_string(),
            start_sec: g.start,
            end_sec: g.end,
        })
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Resample `features` to exactly `t` rows by linear interpolation along time.
///
/// Row `i` is taken at source position `i·(T0−1)/(t−1)`; `t = 1` yields the
/// mean row.
pub fn sample_segments(features: &Array2<f64>, t: usize) -> Array2<f64> {
    let (t0, d) = features.dim();
    assert!(t0 >= 1 && t >= 1, "sample_segments needs non-empty input and target");
    let mut out = Array2::zeros((t, d));
    if t == 1 {
        // running mean keeps constant inputs exact
        let mut mean = features.row(0).to_owned();
        for (k, row) in features.rows().into_iter().enumerate().skip(1) {
            let n = (k + 1) as f64;
            ndarray::Zip::from(&mut mean).and(&row).for_each(|m, &x| *m += (x - *m) / n);
        }
        out.row_mut(0).assign(&mean);
        return out;
    }
    for i in 0..t {
        let num = (i * (t0 - 1)) as f64;
        let pos = num / (t - 1) as f64;
        let lo = (pos.floor() as usize).min(t0 - 1);
        let frac = pos - lo as f64;
        if frac == 0.0 || lo + 1 >= t0 {
            out.row_mut(i).assign(&features.row(lo));
        } else {
            let a = features.row(lo);
            let b = features.row(lo + 1);
            ndarray::Zip::from(out.row_mut(i)).and(&a).and(&b).for_each(|o, &a, &b| *o = a + frac * (b - a));
        }
    }
    out
}

/// Time in seconds at the left edge of segment `index` of a video resampled to `t` segments.
pub fn segment_time(index: usize, t: usize, duration: f64) -> f64 {
    index as f64 * duration / t as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn write_single(dir: &Path, labels: &[&str]) -> PathBuf {
        let classes = ClassList::new(vec!["jump".into(), "run".into()]);
        classes.save(&dir.join(CLASSES_FILE)).unwrap();
        fs::create_dir_all(dir.join("features")).unwrap();
        write_video_features(&dir.join("features/v0.wstf"), &array![[1.0, 2.0]]).unwrap();
        let entry = ManifestEntry {
            id: "v0".into(),
            feature_path: "features/v0.wstf".into(),
            duration_sec: 3.0,
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        let p = dir.join("train.jsonl");
        fs::write(&p, serde_json::to_string(&entry).unwrap() + "\n").unwrap();
        p
    }

    #[test]
    fn single_video_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_single(dir.path(), &["jump"]);
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.videos.len(), 1);
        assert_eq!(m.videos[0].labels, vec![1, 0]);
        assert!(m.ground_truth.is_none());
    }

    #[test]
    fn unknown_label_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_single(dir.path(), &["swim"]);
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("swim"));
    }

    #[test]
    fn missing_feature_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_single(dir.path(), &["jump"]);
        fs::remove_file(dir.path().join("features/v0.wstf")).unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("features/v0.wstf"), "{err}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let classes = ClassList::new(vec!["a".into(), "b".into(), "c".into()]);
        let records = vec![
            VideoRecord { id: "x".into(), features: array![[0.5, 1.0], [2.0, -1.0]], duration: 4.0, labels: vec![1, 0, 1] },
            VideoRecord { id: "y".into(), features: array![[0.25, 0.0]], duration: 1.5, labels: vec![0, 1, 0] },
        ];
        let p = dir.path().join("train.jsonl");
        write_manifest(&p, &records, &classes).unwrap();
        let gt = vec![GroundTruthSegment { video_id: "x".into(), class_id: 2, start: 0.5, end: 1.25 }];
        write_ground_truth(&dir.path().join(GROUND_TRUTH_FILE), &gt, &classes).unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.load_records().unwrap(), records);
        assert_eq!(m.ground_truth.unwrap(), gt);
    }

    #[test]
    fn resample_identity_and_hand_cases() {
        let x = array![[1.0, 2.0], [3.0, 5.0], [0.0, -1.0]];
        assert_eq!(sample_segments(&x, 3), x);

        let ab = array![[0.0, 3.0], [3.0, 0.0]];
        let up = sample_segments(&ab, 4);
        let expected = array![[0.0, 3.0], [1.0, 2.0], [2.0, 1.0], [3.0, 0.0]];
        for (u, e) in up.iter().zip(expected.iter()) {
            assert!((u - e).abs() < 1e-12);
        }

        let five = Array2::from_shape_fn((5, 1), |(i, _)| i as f64 * 10.0);
        assert_eq!(sample_segments(&five, 3), array![[0.0], [20.0], [40.0]]);

        let mean = sample_segments(&x, 1);
        assert!((mean[[0, 0]] - 4.0 / 3.0).abs() < 1e-12 && mean[[0, 1]] == 2.0);
    }

    #[test]
    fn segment_time_mapping() {
        assert_eq!(segment_time(0, 75, 150.0), 0.0);
        assert_eq!(segment_time(75, 75, 150.0), 150.0);
        assert_eq!(segment_time(10, 75, 150.0), 20.0);
    }

    proptest! {
        #[test]
        fn resample_preserves_constants(c in -1e3f64..1e3, t0 in 1usize..40, t in 1usize..60, d in 1usize..4) {
            let x = Array2::from_elem((t0, d), c);
            let y = sample_segments(&x, t);
            prop_assert!(y.iter().all(|&v| v == c));
        }

        #[test]
        fn resample_is_monotone_for_monotone_input(t0 in 2usize..30, t in 2usize..60) {
            let x = Array2::from_shape_fn((t0, 1), |(i, _)| i as f64);
            let y = sample_segments(&x, t);
            for i in 1..t {
                prop_assert!(y[[i, 0]] >= y[[i - 1, 0]]);
            }
            prop_assert_eq!(y[[0, 0]], 0.0);
            prop_assert_eq!(y[[t - 1, 0]], (t0 - 1) as f64);
        }

        #[test]
        fn feature_file_round_trip(rows in 1usize..8, cols in 1usize..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-100.0f32..100.0) as f64);
            let (back, _) = tensor_file::decode(&tensor_file::encode_f32(&m), Path::new("mem"), 0).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}

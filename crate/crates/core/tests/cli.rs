use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn wstal(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_wstal")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "wstal {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_dataset(dir: &Path, seed: u64) {
    let seed = seed.to_string();
    wstal(&[
        "synth-data", "--seed", &seed, "--classes", "2", "--videos", "6", "--test-videos", "3",
        "--segments", "64", "--dim", "4", "--out", dir.to_str().unwrap(),
    ]);
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_data_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    small_dataset(&a, 5);
    small_dataset(&b, 5);
    small_dataset(&c, 6);
    let first = tree_bytes(&a);
    assert!(first.iter().any(|(n, _)| n == "train.jsonl"));
    assert_eq!(first, tree_bytes(&b));
    assert_ne!(first, tree_bytes(&c));
}

#[test]
fn ground_truth_as_proposals_scores_full_map() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, 1);
    let gt = data.join("ground_truth.csv");
    let proposals: String = fs::read_to_string(&gt).unwrap().lines().map(|l| format!("{l},0.9\n")).collect();
    let prop_path = tmp.path().join("proposals.csv");
    fs::write(&prop_path, proposals).unwrap();
    let out = tmp.path().join("eval");
    wstal(&["evaluate", "--proposals", prop_path.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let table = wstal::report::read_map_table(&out.join("map.jsonl")).unwrap();
    assert_eq!(table.average, 1.0);
    assert!(table.map.iter().all(|&m| m == 1.0));
}

#[test]
fn ablate_baseline_matches_train_with_components_off() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, 2);
    let common = ["--data", data.to_str().unwrap(), "--epochs", "3", "--warmup", "1", "--codewords", "4", "--seed", "11"];
    let abl = tmp.path().join("abl");
    let mut args = vec!["ablate"];
    args.extend(common);
    args.extend(["--out", abl.to_str().unwrap()]);
    wstal(&args);
    let run = tmp.path().join("run");
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--disable", "rmgcl", "--disable", "gks", "--disable", "gka", "--disable", "pseudo", "--out", run.to_str().unwrap()]);
    wstal(&args);
    for file in ["metrics.jsonl", "map.jsonl"] {
        assert_eq!(fs::read(abl.join("baseline").join(file)).unwrap(), fs::read(run.join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn report_renders_a_trained_run() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, 3);
    let run = tmp.path().join("run");
    wstal(&["train", "--data", data.to_str().unwrap(), "--epochs", "2", "--warmup", "1", "--codewords", "4", "--out", run.to_str().unwrap()]);
    wstal(&["report", "--run", run.to_str().unwrap()]);
    for f in ["report.md", "loss.svg", "map.svg"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
}

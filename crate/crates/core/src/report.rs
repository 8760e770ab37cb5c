//! Static report rendering: markdown tables and SVG charts from run logs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::MapTable;
use crate::trainer::{EpochRecord, METRICS_FILE};

pub const MAP_FILE: &str = "map.jsonl";
pub const ABLATION_FILE: &str = "ablation.jsonl";

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub rmgcl: bool,
    pub gks: bool,
    pub gka: bool,
    pub pseudo: bool,
    pub table: MapTable,
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    read_jsonl(path)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Parse the line format written by [`MapTable::to_jsonl`].
pub fn read_map_table(path: &Path) -> Result<MapTable> {
    let rows: Vec<serde_json::Value> = read_jsonl(path)?;
    let mut thresholds = Vec::new();
    let mut map = Vec::new();
    let mut average = None;
    for r in rows {
        let m = r["map"].as_f64().ok_or_else(|| Error::Config(format!("{}: record without map", path.display())))?;
        match r["tiou"].as_f64() {
            Some(t) => {
                thresholds.push(t);
                map.push(m);
            }
            None => average = Some(m),
        }
    }
    let average = average.ok_or_else(|| Error::Config(format!("{}: missing average record", path.display())))?;
    Ok(MapTable { thresholds, map, average })
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let Some(first) = rows.first() else {
        return s;
    };
    s.push_str("| RMGCL | GKS | GKA | Pseudo |");
    for t in &first.table.thresholds {
        let _ = write!(s, " {t:.2} |");
    }
    s.push_str(" AVG |\n|---|---|---|---|");
    for _ in &first.table.thresholds {
        s.push_str("---|");
    }
    s.push_str("---|\n");
    let mark = |b: bool| if b { "x" } else { " " };
    for r in rows {
        let _ = write!(s, "| {} | {} | {} | {} |", mark(r.rmgcl), mark(r.gks), mark(r.gka), mark(r.pseudo));
        for m in &r.table.map {
            let _ = write!(s, " {:.2} |", m * 100.0);
        }
        let _ = writeln!(s, " {:.2} |", r.table.average * 100.0);
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bar chart.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    assert_eq!(labels.len(), values.len());
    let (w, h, pad, bottom) = (640.0, 360.0, 40.0, 90.0);
    let max = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let n = values.len().max(1) as f64;
    let slot = (w - 2.0 * pad) / n;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let base = h - bottom;
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, w - pad);
    for (i, (l, v)) in labels.iter().zip(values).enumerate() {
        let bh = (v / max) * (base - pad);
        let x = pad + i as f64 * slot + slot * 0.15;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="#4878a8"/>"##,
            base - bh,
            slot * 0.7
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#, base - bh - 4.0, v);
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="end" transform="rotate(-35 {cx:.1} {:.1})">{}</text>"#,
            base + 14.0,
            base + 14.0,
            escape(l)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Polyline of `values` against their index.
pub fn line_chart_svg(title: &str, values: &[f64]) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) as f64 - 1.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * pad, h - 2.0 * pad);
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, v)| {
            let x = pad + (i as f64 / n) * (w - 2.0 * pad);
            let y = h - pad - ((v - lo) / span) * (h - 2.0 * pad);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#c04828" stroke-width="1.5"/>"##, points.join(" "));
    if !finite.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.4}</text>"#, pad - 4.0, pad + 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{lo:.4}</text>"#, pad - 4.0, h - pad);
    }
    s.push_str("</svg>\n");
    s
}

/// Render whatever logs `dir` holds into `report.md` plus SVG charts.
/// Returns the files written.
pub fn render_run(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut md = String::from("# Run report\n\n");
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        let log = read_metrics(&metrics)?;
        let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
        let p = dir.join("loss.svg");
        fs::write(&p, line_chart_svg("training loss per epoch", &losses))?;
        written.push(p);
        let _ = writeln!(md, "## Training\n\n{} epochs, final loss {:.4}.\n\n![loss](loss.svg)\n", log.len(), losses.last().copied().unwrap_or(f64::NAN));
        let maps: Vec<(usize, f64)> = log.iter().filter_map(|r| r.map.map(|m| (r.epoch, m))).collect();
        if !maps.is_empty() {
            md.push_str("| epoch | avg mAP (%) |\n|---|---|\n");
            for (e, m) in maps {
                let _ = writeln!(md, "| {e} | {:.2} |", m * 100.0);
            }
            md.push('\n');
        }
    }
    let map_path = dir.join(MAP_FILE);
    if map_path.exists() {
        let t = read_map_table(&map_path)?;
        let mut labels: Vec<String> = t.thresholds.iter().map(|x| format!("{x:.2}")).collect();
        labels.push("AVG".into());
        let mut values: Vec<f64> = t.map.iter().map(|m| m * 100.0).collect();
        values.push(t.average * 100.0);
        let p = dir.join("map.svg");
        fs::write(&p, bar_chart_svg("mAP (%) per tIoU threshold", &labels, &values))?;
        written.push(p);
        let _ = writeln!(md, "## Evaluation\n\n```\n{}```\n\n![map](map.svg)\n", t.to_text());
    }
    let abl_path = dir.join(ABLATION_FILE);
    if abl_path.exists() {
        let rows: Vec<AblationRow> = read_jsonl(&abl_path)?;
        let labels: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
        let values: Vec<f64> = rows.iter().map(|r| r.table.average * 100.0).collect();
        let p = dir.join("ablation.svg");
        fs::write(&p, bar_chart_svg("average mAP (%) per component set", &labels, &values))?;
        written.push(p);
        let _ = writeln!(md, "## Ablation\n\n{}\n![ablation](ablation.svg)\n", ablation_markdown(&rows));
    }
    if written.is_empty() {
        return Err(Error::Config(format!("{} holds no metrics, mAP or ablation logs", dir.display())));
    }
    let p = dir.join("report.md");
    fs::write(&p, md)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(avg: f64) -> MapTable {
        MapTable { thresholds: vec![0.1, 0.5], map: vec![avg + 0.1, avg - 0.1], average: avg }
    }

    #[test]
    fn map_table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(0.4);
        let p = dir.path().join(MAP_FILE);
        fs::write(&p, t.to_jsonl()).unwrap();
        assert_eq!(read_map_table(&p).unwrap(), t);
    }

    #[test]
    fn ablation_table_marks_components() {
        let rows = vec![
            AblationRow { label: "baseline".into(), rmgcl: false, gks: false, gka: false, pseudo: false, table: table(0.3) },
            AblationRow { label: "all".into(), rmgcl: true, gks: true, gka: true, pseudo: true, table: table(0.5) },
        ];
        let md = ablation_markdown(&rows);
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("| x | x | x | x | 60.00 | 40.00 | 50.00 |"));
    }

    #[test]
    fn charts_are_well_formed() {
        let svg = bar_chart_svg("a<b", &["x".into(), "y".into()], &[1.0, 2.0]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<rect").count(), 2);
        let line = line_chart_svg("loss", &[3.0, 2.0, f64::NAN, 1.0]);
        assert!(line.contains("<polyline"));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_run(dir.path()).is_err());
    }
}

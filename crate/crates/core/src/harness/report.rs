use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{AblationReport, EvalReport, TimingReport};
use crate::error::HarnessError;

fn pct(rate: f64) -> String {
    format!("{:.1}", 100.0 * rate)
}

/// Summary grid: one row per dimension, one column per mode, plus the
/// Adaptive-minus-Base column when both modes ran, and a closing `Avg` row.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("dimension");
    for m in &report.modes {
        out.push(',');
        out.push_str(m);
    }
    if report.deltas.is_some() {
        out.push_str(",Delta");
    }
    out.push('\n');
    for (i, &d) in report.dimensions.iter().enumerate() {
        out.push_str(d.name());
        for m in &report.modes {
            let r = report.rate(m, d).expect("cell evaluated");
            let _ = write!(out, ",{}", pct(r));
        }
        if let Some(deltas) = &report.deltas {
            let _ = write!(out, ",{}", pct(deltas[i].delta));
        }
        out.push('\n');
    }
    out.push_str("Avg");
    for m in &report.modes {
        let _ = write!(out, ",{}", pct(report.average(m).expect("mode evaluated")));
    }
    if let Some(d) = report.average_delta {
        let _ = write!(out, ",{}", pct(d));
    }
    out.push('\n');
    out
}

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from("mode,ttt,variance_filter,adaptive_buffer,success\n");
    let mark = |b: bool| if b { "yes" } else { "no" };
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.mode,
            mark(r.ttt),
            mark(r.variance_filter),
            mark(r.adaptive_buffer),
            pct(r.success_rate)
        );
    }
    out
}

pub fn timing_csv(report: &TimingReport) -> String {
    let mut out = String::from("mode,mean_wall_time_s,relative_time,mean_updates\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.2},{:.2}",
            r.mode, r.mean_wall_time_s, r.relative_time, r.mean_updates
        );
    }
    out
}

/// Bar chart of relative per-episode time, each bar labelled with its factor.
pub fn render_timing_svg(report: &TimingReport) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    const LEFT: f64 = 40.0;
    let n = report.rows.len().max(1) as f64;
    let max = report
        .rows
        .iter()
        .map(|r| r.relative_time)
        .fold(1.0_f64, f64::max);
    let plot_h = H - TOP - BOTTOM;
    let slot = (W - 2.0 * LEFT) / n;
    let bar_w = slot * 0.6;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"  <text x="{:.1}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">Relative time per episode ({})</text>"#,
        W / 2.0,
        report.dimension.name()
    );
    let axis_y = H - BOTTOM;
    let _ = writeln!(
        s,
        r#"  <line x1="{LEFT}" y1="{axis_y}" x2="{:.1}" y2="{axis_y}" stroke="black"/>"#,
        W - LEFT
    );
    for (i, r) in report.rows.iter().enumerate() {
        let h = plot_h * r.relative_time / max;
        let x = LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        let cx = x + bar_w / 2.0;
        let _ = writeln!(
            s,
            r##"  <rect x="{x:.1}" y="{:.1}" width="{bar_w:.1}" height="{h:.1}" fill="#4a7ab5"/>"##,
            axis_y - h
        );
        let _ = writeln!(
            s,
            r#"  <text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">{:.2}x</text>"#,
            axis_y - h - 6.0,
            r.relative_time
        );
        let _ = writeln!(
            s,
            r#"  <text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
            axis_y + 18.0,
            r.mode
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, HarnessError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> Result<String, HarnessError> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|e| HarnessError::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn emit_eval(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    ensure_dir(dir)?;
    Ok(vec![
        write_file(dir, "report.csv", &eval_csv(report))?,
        write_file(dir, "report.json", &to_json(report)?)?,
    ])
}

pub fn emit_ablation(report: &AblationReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    ensure_dir(dir)?;
    Ok(vec![
        write_file(dir, "report.csv", &ablation_csv(report))?,
        write_file(dir, "report.json", &to_json(report)?)?,
    ])
}

/// Writes `report.csv`, `report.json` and `timing.svg` into `dir`.
pub fn emit_timing(report: &TimingReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    ensure_dir(dir)?;
    Ok(vec![
        write_file(dir, "report.csv", &timing_csv(report))?,
        write_file(dir, "report.json", &to_json(report)?)?,
        write_file(dir, "timing.svg", &render_timing_svg(report))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Dimension, EpisodeConfig};
    use crate::harness::{CellResult, DimensionDelta, ModeAverage, ReportMetadata, Setting, TimingRow};
    use crate::ttt::TttConfig;

    fn meta() -> ReportMetadata {
        ReportMetadata {
            env: EpisodeConfig::default(),
            ttt: TttConfig::default(),
            base_seed: 0,
            checkpoint_digest: Some("ab".into()),
            run_config: None,
        }
    }

    fn grid() -> EvalReport {
        let dims = Dimension::PERTURBED.to_vec();
        let mut cells = Vec::new();
        for (m, off) in [("Base", 0usize), ("Adaptive", 3)] {
            for (i, &d) in dims.iter().enumerate() {
                let successes = 300 + 10 * i + off;
                cells.push(CellResult {
                    mode: m.into(),
                    dimension: d,
                    episodes: 500,
                    successes,
                    success_rate: successes as f64 / 500.0,
                    mean_updates: 0.0,
                    mean_steps: 0.0,
                    mean_pairs_accepted: 0.0,
                });
            }
        }
        let avg = |m: &str| {
            let r: Vec<f64> = cells.iter().filter(|c| c.mode == m).map(|c| c.success_rate).collect();
            r.iter().sum::<f64>() / r.len() as f64
        };
        let deltas = dims
            .iter()
            .map(|&d| DimensionDelta { dimension: d, delta: 3.0 / 500.0 })
            .collect();
        EvalReport {
            setting: Setting::WithPerturbedTrain,
            modes: vec!["Base".into(), "Adaptive".into()],
            dimensions: dims,
            episodes_per_dim: 500,
            averages: vec![
                ModeAverage { mode: "Base".into(), average: avg("Base") },
                ModeAverage { mode: "Adaptive".into(), average: avg("Adaptive") },
            ],
            average_delta: Some(avg("Adaptive") - avg("Base")),
            cells,
            deltas: Some(deltas),
            metadata: meta(),
            episodes: None,
        }
    }

    #[test]
    fn csv_grid_shape() {
        let csv = eval_csv(&grid());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 9);
        assert_eq!(lines[0], "dimension,Base,Adaptive,Delta");
        assert_eq!(lines[1], "Robot,60.0,60.6,0.6");
        assert!(lines[8].starts_with("Avg,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
    }

    #[test]
    fn csv_without_pair_has_no_delta_column() {
        let mut r = grid();
        r.modes = vec!["Base".into()];
        r.cells.retain(|c| c.mode == "Base");
        r.averages.truncate(1);
        r.deltas = None;
        r.average_delta = None;
        let csv = eval_csv(&r);
        assert!(csv.lines().all(|l| l.split(',').count() == 2));
    }

    #[test]
    fn emitted_files_are_byte_identical_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let r = grid();
        let first: Vec<Vec<u8>> = emit_eval(&r, dir.path())
            .unwrap()
            .iter()
            .map(|p| fs::read(p).unwrap())
            .collect();
        let second: Vec<Vec<u8>> = emit_eval(&r, dir.path())
            .unwrap()
            .iter()
            .map(|p| fs::read(p).unwrap())
            .collect();
        assert_eq!(first, second);
        let back: EvalReport =
            serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn timing_svg_is_well_formed_and_labelled() {
        let t = TimingReport {
            dimension: Dimension::Robot,
            episodes: 100,
            rows: vec![
                TimingRow { mode: "Base".into(), mean_wall_time_s: 0.01, mean_updates: 0.0, mean_steps: 200.0, relative_time: 1.0 },
                TimingRow { mode: "Indiscriminate".into(), mean_wall_time_s: 0.03, mean_updates: 49.0, mean_steps: 200.0, relative_time: 3.0 },
                TimingRow { mode: "Adaptive".into(), mean_wall_time_s: 0.015, mean_updates: 14.0, mean_steps: 200.0, relative_time: 1.5 },
            ],
            metadata: meta(),
        };
        let svg = render_timing_svg(&t);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let root = doc.root_element();
        assert_eq!(root.tag_name().name(), "svg");
        assert_eq!(root.attribute("version"), Some("1.1"));
        assert_eq!(root.children().filter(|n| n.has_tag_name("rect")).count(), 3);
        let texts: Vec<&str> = root
            .descendants()
            .filter(|n| n.has_tag_name("text"))
            .filter_map(|n| n.text())
            .collect();
        for label in ["1.00x", "3.00x", "1.50x", "Base", "Adaptive"] {
            assert!(texts.contains(&label), "{label}");
        }
        let dir = tempfile::tempdir().unwrap();
        let files = emit_timing(&t, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = emit_eval(&grid(), &blocker.join("sub")).unwrap_err();
        assert!(matches!(err, HarnessError::Io { .. }));
    }
}

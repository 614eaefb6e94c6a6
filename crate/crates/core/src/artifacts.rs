//! Output files: `metrics.jsonl`, `summary.csv`, `curves.svg`.
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{MetricsRecord, RunMetrics};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves.svg";

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("not a file path")))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn metrics_jsonl(metrics: &RunMetrics) -> String {
    let mut out = String::new();
    for r in &metrics.records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_metrics_jsonl(text: &str, path: &Path) -> Result<RunMetrics> {
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(RunMetrics { records })
}

pub fn read_metrics_jsonl(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_jsonl(&text, path)
}

/// One line of `summary.csv`: the final metrics of a run, or its failure.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run: String,
    pub seed: u64,
    pub outcome: std::result::Result<MetricsRecord, String>,
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut w = csv_writer();
    let mut header = vec!["run", "seed", "status", "error"];
    header.extend(MetricsRecord::FIELDS);
    w.write_record(&header).expect("in-memory write");
    for row in rows {
        let mut rec = vec![row.run.clone(), row.seed.to_string()];
        match &row.outcome {
            Ok(r) => {
                rec.push("ok".into());
                rec.push(String::new());
                rec.extend(r.csv_cells());
            }
            Err(e) => {
                rec.push("failed".into());
                rec.push(e.clone());
                rec.extend(std::iter::repeat_n(String::new(), MetricsRecord::FIELDS.len()));
            }
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

struct Series<'a> {
    name: &'a str,
    colour: &'a str,
    points: Vec<(f64, f64)>,
}

fn panel(svg: &mut String, top: f64, title: &str, series: &[Series<'_>], x_max: f64) {
    const LEFT: f64 = 60.0;
    const WIDTH: f64 = 520.0;
    const HEIGHT: f64 = 200.0;
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut lo, mut hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let sx = |x: f64| LEFT + WIDTH * x / x_max.max(1.0);
    let sy = |y: f64| top + HEIGHT - HEIGHT * (y - lo) / (hi - lo);
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{top}" width="{WIDTH}" height="{HEIGHT}" fill="none" stroke="#999"/>"##
    );
    let _ = writeln!(svg, r#"<text x="{LEFT}" y="{}" font-size="13">{title}</text>"#, top - 6.0);
    let _ = writeln!(svg, r#"<text x="4" y="{}" font-size="10">{hi:.3}</text>"#, top + 10.0);
    let _ = writeln!(svg, r#"<text x="4" y="{}" font-size="10">{lo:.3}</text>"#, top + HEIGHT);
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.colour,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10" fill="{}">{}</text>"#,
            LEFT + WIDTH + 8.0,
            top + 12.0 + 14.0 * i as f64,
            s.colour,
            s.name
        );
    }
}

/// Loss and AUROC curves against iteration as a static SVG, one polyline per
/// series with at least one point.
pub fn curves_svg(metrics: &RunMetrics) -> String {
    let recs = &metrics.records;
    let x_max = recs.last().map_or(1.0, |r| r.iteration as f64);
    let series = |name, colour, f: &dyn Fn(&MetricsRecord) -> Option<f64>| Series {
        name,
        colour,
        points: recs
            .iter()
            .filter_map(|r| f(r).filter(|v| v.is_finite()).map(|v| (r.iteration as f64, v)))
            .collect(),
    };
    let losses = [
        series("total", "#000000", &|r| Some(r.loss_total)),
        series("cls_l", "#1f77b4", &|r| Some(r.loss_cls_l)),
        series("cls_u", "#ff7f0e", &|r| Some(r.loss_cls_u)),
        series("det_l", "#2ca02c", &|r| Some(r.loss_det_l)),
    ];
    let aurocs = [
        series("auroc_seen", "#d62728", &|r| r.auroc_seen),
        series("auroc_unseen", "#9467bd", &|r| r.auroc_unseen),
        series("auroc_avg", "#8c564b", &|r| r.auroc_avg),
        series("accuracy", "#17becf", &|r| r.accuracy),
    ];
    let mut svg = String::new();
    svg.push_str(r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    svg.push('\n');
    svg.push_str(r#"<svg xmlns="http://www.w3.org/2000/svg" width="680" height="520" viewBox="0 0 680 520">"#);
    svg.push('\n');
    panel(&mut svg, 30.0, "loss", &losses, x_max);
    panel(&mut svg, 290.0, "AUROC / accuracy", &aurocs, x_max);
    let _ = writeln!(svg, r#"<text x="300" y="512" font-size="11">iteration</text>"#);
    svg.push_str("</svg>\n");
    svg
}

/// Writes the three per-run files into `out_dir`, creating it if needed.
pub fn emit_run_artifacts(out_dir: &Path, run: &str, seed: u64, metrics: &RunMetrics) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let row = SummaryRow {
        run: run.to_string(),
        seed,
        outcome: metrics.last().cloned().ok_or_else(|| "no evaluation points".to_string()),
    };
    let files = [
        (METRICS_FILE, metrics_jsonl(metrics)),
        (SUMMARY_FILE, summary_csv(&[row])),
        (CURVES_FILE, curves_svg(metrics)),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}

//! Merging calibration reports into comparison tables and plot data.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cgpo_core::metrics::{curve_csv, REPORT_SCHEMA_VERSION};
use cgpo_core::CalibrationReport;

use crate::CliError;

pub const COMPARISON_HEADER: &str =
    "method,ece,brier,valid,accuracy_all,high_conf_accuracy,avg_conf_incorrect,avg_conf_incorrect_std";
pub const CURVES_HEADER: &str = "method,bin_lo,bin_hi,count,mean_conf,mean_acc";

fn supported_major() -> u32 {
    REPORT_SCHEMA_VERSION.split('.').next().and_then(|m| m.parse().ok()).expect("schema version has a major")
}

/// Reads `report.json` from a directory, or the given file directly.
pub fn load_report(path: &Path) -> Result<CalibrationReport, CliError> {
    let file: PathBuf = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| CliError::User(format!("cannot read report {}: {e}", file.display())))?;
    let report: CalibrationReport =
        serde_json::from_str(&text).map_err(|e| CliError::User(format!("report {}: {e}", file.display())))?;
    match report.schema_major() {
        Some(m) if m == supported_major() => Ok(report),
        _ => Err(CliError::User(format!(
            "report {} has schema_version {}, this build reads {}.x",
            file.display(),
            report.schema_version,
            supported_major()
        ))),
    }
}

/// A report with the name it appears under in merged outputs.
#[derive(Debug, Clone)]
pub struct Labeled {
    pub label: String,
    pub report: CalibrationReport,
}

/// Uses each report's method name, adding the source directory when two reports share one.
pub fn label_reports(inputs: Vec<(PathBuf, CalibrationReport)>) -> Result<Vec<Labeled>, CliError> {
    if inputs.is_empty() {
        return Err(CliError::User("report needs at least one input".into()));
    }
    let versions: Vec<&str> = inputs.iter().map(|(_, r)| r.schema_version.as_str()).collect();
    if versions.iter().any(|v| *v != versions[0]) {
        return Err(CliError::User(format!("reports disagree on schema_version: {versions:?}")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (_, r) in &inputs {
        *counts.entry(r.method.as_str()).or_default() += 1;
    }
    let dup: Vec<bool> = inputs.iter().map(|(_, r)| counts[r.method.as_str()] > 1).collect();
    Ok(inputs
        .into_iter()
        .zip(dup)
        .map(|((path, report), dup)| {
            let label = if dup {
                let stem = path
                    .components()
                    .rfind(|c| c.as_os_str() != "report.json")
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .unwrap_or_default();
                format!("{}@{stem}", report.method)
            } else {
                report.method.clone()
            };
            Labeled { label, report }
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn comparison_csv(reports: &[Labeled]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for l in reports {
        let r = &l.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&l.label),
            cell(r.ece),
            cell(r.brier),
            r.n_valid,
            r.accuracy_all,
            cell(r.high_conf_accuracy),
            cell(r.avg_conf_incorrect),
            cell(r.avg_conf_incorrect_std)
        );
    }
    out
}

pub fn merged_curves_csv(reports: &[Labeled]) -> String {
    let mut out = format!("{CURVES_HEADER}\n");
    for l in reports {
        for b in &l.report.bins {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(&l.label),
                b.lo,
                b.hi,
                b.count,
                cell(b.mean_conf),
                cell(b.mean_acc)
            );
        }
    }
    out
}

/// File-system safe version of a label.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

/// Reliability diagram: mean accuracy against mean confidence per non-empty bin.
pub fn reliability_svg(reports: &[Labeled]) -> String {
    let (w, h, m) = (480.0, 480.0, 50.0);
    let x = |v: f64| m + v * (w - 2.0 * m);
    let y = |v: f64| h - m - v * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" font-family="sans-serif" font-size="12">"#, h + 20.0 * reports.len() as f64);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * m, h - 2.0 * m);
    let _ = writeln!(s, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##, x(0.0), y(0.0), x(1.0), y(1.0));
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v}</text>"#, x(v), h - m + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v}</text>"#, m - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">confidence</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">accuracy</text>"#, h / 2.0, h / 2.0);
    for (i, l) in reports.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = l
            .report
            .bins
            .iter()
            .filter_map(|b| Some(format!("{:.2},{:.2}", x(b.mean_conf?), y(b.mean_acc?))))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        for p in &points {
            let (px, py) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = h + 14.0 * i as f64 + 2.0;
        let label = l.label.replace('&', "&amp;").replace('<', "&lt;");
        let _ = writeln!(s, r#"<rect x="{m}" y="{}" width="10" height="10" fill="{color}"/>"#, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{label}</text>"#, m + 16.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes comparison.csv, curves.csv, one curve_<label>.csv per report and
/// optionally reliability.svg into `out`.
pub fn write_outputs(reports: &[Labeled], out: &Path, svg: bool) -> Result<Vec<PathBuf>, CliError> {
    let mut files = vec![
        (out.join("comparison.csv"), comparison_csv(reports)),
        (out.join("curves.csv"), merged_curves_csv(reports)),
    ];
    for l in reports {
        files.push((out.join(format!("curve_{}.csv", file_stem(&l.label))), curve_csv(&l.report.bins)));
    }
    if svg {
        files.push((out.join("reliability.svg"), reliability_svg(reports)));
    }
    for (path, text) in &files {
        fs::write(path, text).map_err(|e| crate::io_err("cannot write", path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

//! Result files. CSV is the source of truth; `report.md` and
//! `ratio_plot.svg` are rendered from the CSV files so `qmul report` can
//! rebuild them from disk alone.
//!
//! Output directory layout:
//!
//! ```text
//! config.json              effective config
//! results.csv              method,fa,ra,ta,mia,ag,gap_fa,gap_ra,gap_ta,gap_mia
//! run.json                 full record (reports, errors, config hash)
//! diagnostics/<name>.csv   epoch,g_f,g_r,ratio,alpha_f,alpha_r
//! checkpoints/<name>.qmck  models, including original.qmck
//! report.md, ratio_plot.svg
//! metadata.json            wall-clock timestamp and crate version
//! ```
//!
//! Everything but `metadata.json` is a deterministic function of the config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fmt_percent, fmt_with_gap, EpochDiagnostics};

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use super::experiment::{Experiment, MethodRow, RunRecord, RATIO_FLOAT, RATIO_QUANT};

pub const RESULTS_CSV: &str = "results.csv";
pub const REPORT_MD: &str = "report.md";
pub const RATIO_SVG: &str = "ratio_plot.svg";
pub const DIAGNOSTICS_DIR: &str = "diagnostics";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of `results.csv`. Metric fields are empty for a failed method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub method: String,
    pub fa: Option<f64>,
    pub ra: Option<f64>,
    pub ta: Option<f64>,
    pub mia: Option<f64>,
    pub ag: Option<f64>,
    pub gap_fa: Option<f64>,
    pub gap_ra: Option<f64>,
    pub gap_ta: Option<f64>,
    pub gap_mia: Option<f64>,
}

impl From<&MethodRow> for ResultLine {
    fn from(row: &MethodRow) -> Self {
        let r = row.report.as_ref();
        let g = row.gap.as_ref();
        Self {
            method: row.display.clone(),
            fa: r.map(|r| r.fa),
            ra: r.map(|r| r.ra),
            ta: r.map(|r| r.ta),
            mia: r.map(|r| r.mia),
            ag: g.map(|g| g.ag),
            gap_fa: g.map(|g| g.fa),
            gap_ra: g.map(|g| g.ra),
            gap_ta: g.map(|g| g.ta),
            gap_mia: g.map(|g| g.mia),
        }
    }
}

pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("{name}.qmck"))
}

pub fn diagnostics_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(DIAGNOSTICS_DIR).join(format!("{name}.csv"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_results_csv(path: &Path, lines: &[ResultLine]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    if lines.is_empty() {
        w.write_record([
            "method", "fa", "ra", "ta", "mia", "ag", "gap_fa", "gap_ra", "gap_ta", "gap_mia",
        ])?;
    }
    for l in lines {
        w.serialize(l)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultLine>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|l| l.map_err(Error::from)).collect()
}

pub fn write_diagnostics_csv(path: &Path, rows: &[EpochDiagnostics]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["epoch", "g_f", "g_r", "ratio", "alpha_f", "alpha_r"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_diagnostics_csv(path: &Path) -> Result<Vec<EpochDiagnostics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|l| l.map_err(Error::from)).collect()
}

/// Markdown table `Method | FA | RA | TA | MIA | AG`, each metric followed
/// by its gap to Retrain in parentheses.
pub fn render_markdown(lines: &[ResultLine]) -> String {
    let mut s = String::from("| Method | FA | RA | TA | MIA | AG |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for l in lines {
        let cell = |v: Option<f64>, g: Option<f64>| match (v, g) {
            (Some(v), Some(g)) => fmt_with_gap(v, g),
            (Some(v), None) => fmt_percent(v),
            _ => "failed".to_string(),
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            l.method,
            cell(l.fa, l.gap_fa),
            cell(l.ra, l.gap_ra),
            cell(l.ta, l.gap_ta),
            cell(l.mia, l.gap_mia),
            l.ag.map(fmt_percent).unwrap_or_else(|| "failed".into()),
        );
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line plot of `g_f / g_r` against epoch, one polyline per series.
/// Infinite ratios are left out.
pub fn render_ratio_svg(series: &[(String, Vec<EpochDiagnostics>)]) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 170.0, 30.0, 45.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let finite = || {
        series
            .iter()
            .flat_map(|(_, d)| d.iter())
            .filter(|d| d.ratio.is_finite())
    };
    let max_epoch = finite().map(|d| d.epoch).max().unwrap_or(0).max(1) as f64;
    let max_ratio = finite().map(|d| d.ratio).fold(0.0, f64::max);
    let y_top = if max_ratio > 0.0 { max_ratio * 1.1 } else { 1.0 };
    let x = |e: f64| left + pw * e / max_epoch;
    let y = |r: f64| top + ph * (1.0 - r / y_top);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">Gradient norm ratio G_f / G_r per epoch</text>"#,
        left + pw / 2.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = y_top * i as f64 / 5.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.2}" x2="{}" y2="{yy:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
            left + pw,
            left - 6.0,
            yy + 4.0
        );
    }
    let ticks = (max_epoch as usize).min(10);
    for i in 0..=ticks {
        let e = (max_epoch * i as f64 / ticks as f64).round();
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{e}</text>"#,
            x(e),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    for (i, (name, diags)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = diags
            .iter()
            .filter(|d| d.ratio.is_finite())
            .map(|d| format!("{:.2},{:.2}", x(d.epoch as f64), y(d.ratio)))
            .collect();
        if !points.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                points.join(" ")
            );
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Rebuilds `report.md` and `ratio_plot.svg` from `results.csv` and the
/// diagnostics directory (series sorted by file name).
pub fn emit_report(dir: &Path) -> Result<()> {
    let lines = read_results_csv(&dir.join(RESULTS_CSV))?;
    let mut series = Vec::new();
    let diag_dir = dir.join(DIAGNOSTICS_DIR);
    if diag_dir.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&diag_dir)
            .map_err(|e| Error::io(&diag_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        for p in paths {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            series.push((name, read_diagnostics_csv(&p)?));
        }
    }
    write_text(&dir.join(REPORT_MD), &render_markdown(&lines))?;
    write_text(&dir.join(RATIO_SVG), &render_ratio_svg(&series))
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    created_unix_seconds: u64,
    crate_version: &'a str,
    config_hash: &'a str,
}

pub fn write_metadata(dir: &Path, config_hash: &str) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = Metadata {
        created_unix_seconds: now,
        crate_version: env!("CARGO_PKG_VERSION"),
        config_hash,
    };
    write_text(
        &dir.join("metadata.json"),
        &serde_json::to_string_pretty(&meta)?,
    )
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.json"), &cfg.to_json())
}

pub fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    let lines: Vec<ResultLine> = record.rows.iter().map(ResultLine::from).collect();
    write_results_csv(&dir.join(RESULTS_CSV), &lines)?;
    write_text(
        &dir.join("run.json"),
        &serde_json::to_string_pretty(record)?,
    )
}

pub fn write_ratio_study(dir: &Path, record: &RunRecord) -> Result<()> {
    if let Some(study) = &record.ratio_study {
        write_diagnostics_csv(&diagnostics_path(dir, RATIO_FLOAT), &study.float)?;
        write_diagnostics_csv(&diagnostics_path(dir, RATIO_QUANT), &study.quantized)?;
    }
    Ok(())
}

/// Writes every artefact of a finished run.
pub fn write_experiment(dir: &Path, cfg: &ExperimentConfig, exp: &Experiment) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_config(dir, cfg)?;
    save_checkpoint(&exp.original, &checkpoint_path(dir, "original"))?;
    for run in &exp.runs {
        if let Ok((model, diagnostics)) = &run.outcome {
            save_checkpoint(model, &checkpoint_path(dir, &run.name()))?;
            write_diagnostics_csv(&diagnostics_path(dir, &run.name()), diagnostics)?;
        }
    }
    write_ratio_study(dir, &exp.record)?;
    write_record(dir, &exp.record)?;
    emit_report(dir)?;
    write_metadata(dir, &exp.record.config_hash)
}

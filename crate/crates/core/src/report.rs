//! Metrics tables and standalone SVG charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::{PrecisionReport, BIN_LABELS};
use crate::train::MetricRow;

/// Column order of every metrics table, after the optional `arm` column.
pub const METRIC_COLUMNS: [&str; 4] = ["iter", "loss_denoise", "loss_cameo", "precision_supervised_layer"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no metric rows in {0}")]
    Empty(String),
    #[error("{source_name}: missing column '{column}'")]
    MissingColumn { source_name: String, column: &'static str },
    #[error("{source_name}, line {line}: {msg}")]
    Malformed { source_name: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, ReportError>;

/// Metric rows of one training arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub arm: String,
    pub rows: Vec<MetricRow>,
}

/// `arm,iter,loss_denoise,loss_cameo,precision_supervised_layer`, arms in order.
pub fn metrics_csv(arms: &[ArmMetrics]) -> String {
    let mut out = format!("arm,{}\n", METRIC_COLUMNS.join(","));
    for a in arms {
        for r in &a.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                a.arm, r.iter, r.loss_denoise, r.loss_cameo, r.precision_supervised_layer
            );
        }
    }
    out
}

/// Single-run table with exactly [`METRIC_COLUMNS`].
pub fn metrics_table(rows: &[MetricRow]) -> String {
    let mut out = format!("{}\n", METRIC_COLUMNS.join(","));
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.iter, r.loss_denoise, r.loss_cameo, r.precision_supervised_layer);
    }
    out
}

/// Parses a metrics table. Without an `arm` column every row belongs to
/// `default_arm`. Extra columns are ignored.
pub fn parse_metrics(text: &str, source_name: &str, default_arm: &str) -> Result<Vec<ArmMetrics>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let malformed = |line: usize, msg: String| ReportError::Malformed { source_name: source_name.into(), line, msg };
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(ReportError::MissingColumn { source_name: source_name.into(), column: name })
    };
    let idx: Vec<usize> = METRIC_COLUMNS.iter().map(|&c| col(c)).collect::<Result<_>>()?;
    let arm_col = headers.iter().position(|h| h == "arm");
    let mut arms: Vec<ArmMetrics> = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| malformed(line, e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| malformed(line, format!("missing field {}", i + 1)));
        let num = |i: usize| -> Result<f64> {
            let s = field(i)?;
            s.parse::<f64>().map_err(|_| malformed(line, format!("'{s}' is not a number")))
        };
        let iter_s = field(idx[0])?;
        let iter = iter_s.parse::<usize>().map_err(|_| malformed(line, format!("'{iter_s}' is not an iteration")))?;
        let row = MetricRow { iter, loss_denoise: num(idx[1])?, loss_cameo: num(idx[2])?, precision_supervised_layer: num(idx[3])? };
        let arm = match arm_col {
            Some(c) => field(c)?.to_string(),
            None => default_arm.to_string(),
        };
        match arms.iter_mut().find(|a| a.arm == arm) {
            Some(a) => a.rows.push(row),
            None => arms.push(ArmMetrics { arm, rows: vec![row] }),
        }
    }
    if arms.is_empty() {
        return Err(ReportError::Empty(source_name.into()));
    }
    Ok(arms)
}

/// Trailing moving mean with window `w`.
pub fn moving_mean(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

fn tail_mean(values: &[f64], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

// ---------------------------------------------------------------------------
// SVG

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub categories: Vec<String>,
    /// One value per category and group; `None` leaves a gap.
    pub groups: Vec<(String, Vec<Option<f64>>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Chart {
    Line(LineChart),
    Bar(BarChart),
}

const PANEL_W: f64 = 520.0;
const PANEL_H: f64 = 340.0;
const MARGIN: (f64, f64, f64, f64) = (64.0, 20.0, 40.0, 52.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Roughly five round tick values covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|k| k as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.0e}");
    }
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        MARGIN.0 + (x - self.x0) / span * (PANEL_W - MARGIN.0 - MARGIN.1)
    }
    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        PANEL_H - MARGIN.3 - (y - self.y0) / span * (PANEL_H - MARGIN.2 - MARGIN.3)
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi <= lo {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn axes(out: &mut String, title: &str, x_label: &str, y_label: &str, f: &Frame, x_ticks: &[(f64, String)], y_ticks: &[f64]) {
    let (l, b, t) = (MARGIN.0, PANEL_H - MARGIN.3, MARGIN.2);
    let r = PANEL_W - MARGIN.1;
    let _ = writeln!(out, r##"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"##, PANEL_W / 2.0, esc(title));
    for &y in y_ticks {
        let py = f.py(y);
        let _ = writeln!(out, r##"<line x1="{l:.1}" y1="{py:.1}" x2="{r:.1}" y2="{py:.1}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"##, l - 6.0, py + 4.0, tick_label(y));
    }
    for (x, label) in x_ticks {
        let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"##, x, b + 16.0, esc(label));
    }
    let _ = writeln!(out, r##"<polyline points="{l:.1},{t:.1} {l:.1},{b:.1} {r:.1},{b:.1}" fill="none" stroke="#333"/>"##);
    let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"##, (l + r) / 2.0, PANEL_H - 10.0, esc(x_label));
    let _ = writeln!(
        out,
        r##"<text x="16" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {:.1})">{}</text>"##,
        (t + b) / 2.0,
        (t + b) / 2.0,
        esc(y_label)
    );
}

fn legend(out: &mut String, labels: &[&str]) {
    for (k, label) in labels.iter().enumerate() {
        let y = MARGIN.2 + 8.0 + 16.0 * k as f64;
        let x = PANEL_W - MARGIN.1 - 150.0;
        let c = COLORS[k % COLORS.len()];
        let _ = writeln!(out, r##"<rect x="{x:.1}" y="{:.1}" width="14" height="4" fill="{c}"/>"##, y - 4.0);
        let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"##, x + 20.0, y + 1.0, esc(label));
    }
}

fn line_panel(out: &mut String, c: &LineChart) {
    let (x0, x1) = bounds(c.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (ylo, yhi) = bounds(c.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pad = 0.05 * (yhi - ylo);
    let f = Frame { x0, x1, y0: ylo - pad, y1: yhi + pad };
    let xt: Vec<(f64, String)> = nice_ticks(x0, x1).into_iter().map(|x| (f.px(x), tick_label(x))).collect();
    axes(out, &c.title, &c.x_label, &c.y_label, &f, &xt, &nice_ticks(f.y0, f.y1));
    for (k, s) in c.series.iter().enumerate() {
        let pts: Vec<String> =
            s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"##, pts.join(" "));
        if s.points.len() <= 40 {
            for p in &pts {
                let (x, y) = p.split_once(',').expect("formatted point");
                let _ = writeln!(out, r##"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"##);
            }
        }
    }
    legend(out, &c.series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
}

fn bar_panel(out: &mut String, c: &BarChart) {
    let (_, hi) = bounds(c.groups.iter().flat_map(|g| g.1.iter().flatten().copied()).chain([0.0]));
    let f = Frame { x0: 0.0, x1: c.categories.len().max(1) as f64, y0: 0.0, y1: hi * 1.08 };
    let slot = f.px(1.0) - f.px(0.0);
    let xt: Vec<(f64, String)> = c.categories.iter().enumerate().map(|(k, cat)| (f.px(k as f64 + 0.5), cat.clone())).collect();
    axes(out, &c.title, "", &c.y_label, &f, &xt, &nice_ticks(0.0, f.y1));
    let n = c.groups.len().max(1) as f64;
    let bar_w = 0.8 * slot / n;
    for (g, (_, values)) in c.groups.iter().enumerate() {
        let color = COLORS[g % COLORS.len()];
        for (k, v) in values.iter().enumerate() {
            let Some(v) = v.filter(|v| v.is_finite()) else { continue };
            let x = f.px(k as f64) + 0.1 * slot + g as f64 * bar_w;
            let (top, base) = (f.py(v), f.py(0.0));
            let _ = writeln!(
                out,
                r##"<rect x="{x:.1}" y="{top:.1}" width="{bar_w:.1}" height="{:.1}" fill="{color}"/>"##,
                (base - top).max(0.0)
            );
        }
    }
    legend(out, &c.groups.iter().map(|g| g.0.as_str()).collect::<Vec<_>>());
}

/// One standalone SVG document with the charts laid out on a grid.
pub fn render_svg(charts: &[Chart], columns: usize) -> String {
    let cols = columns.clamp(1, charts.len().max(1));
    let rows = charts.len().div_ceil(cols).max(1);
    let (w, h) = (PANEL_W * cols as f64, PANEL_H * rows as f64);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif">"##
    );
    let _ = writeln!(out, r##"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"##);
    for (k, c) in charts.iter().enumerate() {
        let (x, y) = ((k % cols) as f64 * PANEL_W, (k / cols) as f64 * PANEL_H);
        let _ = writeln!(out, r##"<g transform="translate({x:.0},{y:.0})">"##);
        match c {
            Chart::Line(l) => line_panel(&mut out, l),
            Chart::Bar(b) => bar_panel(&mut out, b),
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

// ---------------------------------------------------------------------------
// Report command

/// Window of the moving mean applied to per-iteration curves.
pub const SMOOTHING: usize = 50;

pub fn loss_and_precision_charts(arms: &[ArmMetrics]) -> Vec<Chart> {
    let curve = |f: fn(&MetricRow) -> f64| -> Vec<Series> {
        arms.iter()
            .map(|a| {
                let vals: Vec<f64> = a.rows.iter().map(f).collect();
                let smooth = moving_mean(&vals, SMOOTHING);
                Series { label: a.arm.clone(), points: a.rows.iter().zip(smooth).map(|(r, v)| (r.iter as f64, v)).collect() }
            })
            .collect()
    };
    vec![
        Chart::Line(LineChart {
            title: "Denoising loss".into(),
            x_label: "iteration".into(),
            y_label: format!("loss_denoise (mean of {SMOOTHING})"),
            series: curve(|r| r.loss_denoise),
        }),
        Chart::Line(LineChart {
            title: "Supervised-layer precision".into(),
            x_label: "iteration".into(),
            y_label: format!("precision (mean of {SMOOTHING})"),
            series: curve(|r| r.precision_supervised_layer),
        }),
    ]
}

pub fn bin_chart(reports: &[(String, PrecisionReport)]) -> Chart {
    Chart::Bar(BarChart {
        title: format!("Precision@{} m by relative rotation", reports.first().map_or(0.0, |r| r.1.rho)),
        y_label: "precision".into(),
        categories: BIN_LABELS.iter().map(|b| format!("{b}°")).collect(),
        groups: reports
            .iter()
            .map(|(name, r)| (name.clone(), BIN_LABELS.iter().map(|b| r.per_bin.get(*b).copied()).collect()))
            .collect(),
    })
}

/// `arm,rows,last_iter,loss_denoise,loss_cameo,precision_supervised_layer`,
/// the last three averaged over the final `SMOOTHING` rows.
pub fn summary_csv(arms: &[ArmMetrics]) -> String {
    let mut out = String::from("arm,rows,last_iter,loss_denoise,loss_cameo,precision_supervised_layer\n");
    for a in arms {
        let col = |f: fn(&MetricRow) -> f64| tail_mean(&a.rows.iter().map(f).collect::<Vec<_>>(), SMOOTHING);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            a.arm,
            a.rows.len(),
            a.rows.last().map_or(0, |r| r.iter),
            col(|r| r.loss_denoise),
            col(|r| r.loss_cameo),
            col(|r| r.precision_supervised_layer)
        );
    }
    out
}

/// Reads metrics files (and optional probe reports) and writes `curves.svg`,
/// `summary.csv`, plus `bins.svg` and `bins.csv` when reports are given.
/// Every input is parsed before anything is written.
pub fn write_report(metrics: &[PathBuf], probe_reports: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if metrics.is_empty() {
        return Err(ReportError::Empty("no metrics files given".into()));
    }
    let mut arms: Vec<ArmMetrics> = Vec::new();
    for path in metrics {
        let text = std::fs::read_to_string(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        for mut a in parse_metrics(&text, &path.display().to_string(), stem)? {
            if arms.iter().any(|b| b.arm == a.arm) {
                a.arm = format!("{stem}:{}", a.arm);
            }
            arms.push(a);
        }
    }
    let mut reports = Vec::new();
    for path in probe_reports {
        let r: PrecisionReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
        reports.push((stem, r));
    }

    std::fs::create_dir_all(out)?;
    let mut written = vec![out.join("curves.svg"), out.join("summary.csv")];
    std::fs::write(&written[0], render_svg(&loss_and_precision_charts(&arms), 2))?;
    std::fs::write(&written[1], summary_csv(&arms))?;
    if !reports.is_empty() {
        let mut csv = String::from("report,bin,pairs,precision\n");
        for (name, r) in &reports {
            for line in r.to_csv().lines().skip(1) {
                let _ = writeln!(csv, "{name},{line}");
            }
        }
        written.push(out.join("bins.svg"));
        written.push(out.join("bins.csv"));
        std::fs::write(&written[2], render_svg(&[bin_chart(&reports)], 1))?;
        std::fs::write(&written[3], csv)?;
    }
    Ok(written)
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "task,variant,ood,metric,value,n,seed_base";

/// One metric cell of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub task: String,
    pub variant: String,
    pub ood: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed_base: u64,
}

/// Wall-clock measurements; kept out of `metrics.csv` so that file stays
/// reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub task: String,
    pub variant: String,
    pub what: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Chart {
    /// Grouped bars: one group per label, one bar per series.
    Bars {
        file: String,
        title: String,
        groups: Vec<String>,
        series: Vec<Series>,
    },
    Lines {
        file: String,
        title: String,
        x_label: String,
        x: Vec<f64>,
        series: Vec<Series>,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub charts: Vec<Chart>,
    pub timing: Vec<TimingRow>,
}

impl EvalReport {
    pub fn push(&mut self, task: &str, variant: &str, ood: &str, metric: &str, value: f64, n: usize, seed_base: u64) {
        self.rows.push(MetricRow {
            task: task.into(),
            variant: variant.into(),
            ood: ood.into(),
            metric: metric.into(),
            value,
            n,
            seed_base,
        });
    }

    pub fn find(&self, variant: &str, ood: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.ood == ood && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.task, r.variant, r.ood, r.metric, r.value, r.n, r.seed_base
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("task,variant,what,seconds\n");
        for t in &self.timing {
            let _ = writeln!(s, "{},{},{},{:.6}", t.task, t.variant, t.what, t.seconds);
        }
        s
    }
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::InvalidArgument("metrics file has an unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::InvalidArgument(format!("metrics line {}: {l:?}", i + 2));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(MetricRow {
                task: f[0].into(),
                variant: f[1].into(),
                ood: f[2].into(),
                metric: f[3].into(),
                value: f[4].parse().map_err(|_| bad())?,
                n: f[5].parse().map_err(|_| bad())?,
                seed_base: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// `10·log10(range² / mse)` with `mse` per element.
pub fn pseudo_psnr(mse_per_element: f64, range: f64) -> f64 {
    10.0 * (range * range / mse_per_element.max(1e-300)).log10()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        esc(title)
    );
    s
}

fn y_axis(s: &mut String, y_max: f64) {
    let plot_h = H - TOP - BOTTOM;
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        H - BOTTOM
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM
    );
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = H - BOTTOM - plot_h * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 && v.abs() < 1000.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

fn legend(s: &mut String, series: &[Series]) {
    for (k, se) in series.iter().enumerate() {
        let y = TOP + 18.0 * k as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{}"/>"#,
            PALETTE[k % PALETTE.len()]
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 18.0, y + 10.0, esc(&se.name));
    }
}

fn nice_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0, f64::max);
    if m > 0.0 {
        m * 1.05
    } else {
        1.0
    }
}

pub fn bar_chart_svg(title: &str, groups: &[String], series: &[Series]) -> String {
    let mut s = header(title);
    let y_max = nice_max(series.iter().flat_map(|se| se.values.iter().copied()));
    y_axis(&mut s, y_max);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let gw = plot_w / groups.len().max(1) as f64;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    for (g, label) in groups.iter().enumerate() {
        let gx = LEFT + gw * g as f64 + gw * 0.1;
        for (k, se) in series.iter().enumerate() {
            let v = se.values.get(g).copied().unwrap_or(0.0);
            let v = if v.is_finite() { v.max(0.0) } else { 0.0 };
            let h = plot_h * v / y_max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                gx + bw * k as f64,
                H - BOTTOM - h,
                bw,
                h,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            gx + gw * 0.4,
            H - BOTTOM + 18.0,
            esc(label)
        );
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

pub fn line_chart_svg(title: &str, x_label: &str, x: &[f64], series: &[Series]) -> String {
    let mut s = header(title);
    let y_max = nice_max(series.iter().flat_map(|se| se.values.iter().copied()));
    y_axis(&mut s, y_max);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x_min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let px = |v: f64| LEFT + plot_w * (v - x_min.min(v)) / span;
    for k in 0..=4 {
        let v = x_min + span * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(v),
            H - BOTTOM + 18.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        H - 16.0,
        esc(x_label)
    );
    for (k, se) in series.iter().enumerate() {
        let pts: Vec<String> = x
            .iter()
            .zip(&se.values)
            .filter(|(_, v)| v.is_finite())
            .map(|(&xv, &yv)| format!("{:.1},{:.1}", px(xv), H - BOTTOM - plot_h * yv.max(0.0) / y_max))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            PALETTE[k % PALETTE.len()],
            pts.join(" ")
        );
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

impl Chart {
    pub fn file(&self) -> &str {
        match self {
            Chart::Bars { file, .. } | Chart::Lines { file, .. } => file,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Chart::Bars {
                title, groups, series, ..
            } => bar_chart_svg(title, groups, series),
            Chart::Lines {
                title,
                x_label,
                x,
                series,
                ..
            } => line_chart_svg(title, x_label, x, series),
        }
    }
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes `metrics.csv`, `timing.csv` and one SVG per chart into `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", out_dir.display()))))?;
    let mut written = vec![out_dir.join("metrics.csv"), out_dir.join("timing.csv")];
    write(written[0].clone(), &report.metrics_csv())?;
    write(written[1].clone(), &report.timing_csv())?;
    for c in &report.charts {
        let p = out_dir.join(c.file());
        write(p.clone(), &c.render())?;
        written.push(p);
    }
    Ok(written)
}

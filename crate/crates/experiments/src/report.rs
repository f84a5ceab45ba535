//! Study reports and their file formats.
//!
//! `report.json`, `metrics.csv` and the SVG figures depend only on
//! (config, seed, code version). Wall-clock time goes to `timing.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::StudyKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub level: usize,
    pub metric: String,
    pub estimate: f64,
    /// `None` for exact quantities.
    pub stderr: Option<f64>,
    pub n: usize,
    /// `None` for diagnostics without a pass/fail rule.
    pub verdict: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub name: String,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: StudyKind,
    pub provenance: Provenance,
    pub rows: Vec<MetricRow>,
    pub verdicts: Vec<Verdict>,
    pub notes: Vec<String>,
    pub figures: Vec<Figure>,
}

impl StudyReport {
    pub fn new(study: StudyKind, provenance: Provenance) -> Self {
        Self {
            study,
            provenance,
            rows: Vec::new(),
            verdicts: Vec::new(),
            notes: Vec::new(),
            figures: Vec::new(),
        }
    }

    pub fn row(&mut self, level: usize, metric: impl Into<String>, estimate: f64, stderr: Option<f64>, n: usize, verdict: Option<bool>) {
        self.rows.push(MetricRow {
            level,
            metric: metric.into(),
            estimate,
            stderr,
            n,
            verdict,
        });
    }

    pub fn verdict(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.verdicts.push(Verdict {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn find(&self, level: usize, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.level == level && r.metric == metric)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["study", "level", "metric", "estimate", "stderr", "n", "verdict"])?;
        for r in &self.rows {
            w.write_record([
                self.study.name().to_string(),
                r.level.to_string(),
                r.metric.clone(),
                r.estimate.to_string(),
                r.stderr.map_or_else(|| "exact".to_string(), |s| s.to_string()),
                r.n.to_string(),
                match r.verdict {
                    Some(true) => "pass".into(),
                    Some(false) => "fail".into(),
                    None => String::new(),
                },
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    /// Writes `report.json`, `metrics.csv` and one SVG per figure; returns the
    /// paths written.
    pub fn emit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = Vec::new();
        let mut put = |name: &str, body: &str| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
            Ok(())
        };
        put("report.json", &self.to_json()?)?;
        put("metrics.csv", &self.to_csv()?)?;
        for f in &self.figures {
            put(&format!("{}.svg", f.name), &render_svg(f))?;
        }
        Ok(written)
    }
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A plain line plot with point markers, one polyline per series.
pub fn render_svg(fig: &Figure) -> String {
    let pts = fig.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0 < x1) {
        (x0, x1) = (x0.min(0.0) - 0.5, x1.max(0.0) + 0.5);
    }
    if !(y0 < y1) {
        (y0, y1) = (y0.min(0.0) - 0.5, y1.max(0.0) + 0.5);
    }
    y0 = y0.min(0.0);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(&fig.title));
    let (l, r, b, t) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(&fig.x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(&fig.y_label)
    );
    for (v, anchor, x, y) in [(y0, "end", l - 4.0, b), (y1, "end", l - 4.0, t + 4.0)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{}</text>"#, tick(v));
    }
    for (v, x) in [(x0, l), (x1, r)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, b + 14.0, tick(v));
    }
    for (i, series) in fig.series.iter().enumerate() {
        let c = COLOURS[i % COLOURS.len()];
        let finite: Vec<(f64, f64)> = series.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        let d: Vec<String> = finite
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, sx(x), sy(y)))
            .collect();
        if !d.is_empty() {
            let _ = writeln!(s, r#"<path class="series" d="{}" stroke="{c}" fill="none"/>"#, d.join(" "));
        }
        for &(x, y) in &finite {
            let _ = writeln!(s, r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{}</text>"#, r - 90.0, t + 14.0 * (i as f64 + 1.0), escape(&series.label));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    format!("{v:.3e}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> StudyReport {
        StudyReport::new(
            StudyKind::Lln,
            Provenance {
                config_hash: "h".into(),
                seed: 1,
                code_version: "0".into(),
            },
        )
    }

    #[test]
    fn empty_report_gives_header_only_csv() {
        assert_eq!(report().to_csv().unwrap(), "study,level,metric,estimate,stderr,n,verdict\n");
    }

    #[test]
    fn csv_marks_exact_rows() {
        let mut r = report();
        r.row(2, "const_variance", 0.0, None, 10, Some(true));
        r.row(0, "l2_error", 0.125, Some(0.5e-3), 200, None);
        let csv = r.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "lln,2,const_variance,0,exact,10,pass");
        assert_eq!(lines[2], "lln,0,l2_error,0.125,0.0005,200,");
    }

    #[test]
    fn svg_has_one_marker_per_point() {
        let fig = Figure {
            name: "f".into(),
            title: "error <vs> level".into(),
            x_label: "level".into(),
            y_label: "error".into(),
            series: vec![Series {
                label: "l2".into(),
                points: vec![(0.0, 0.3), (1.0, 0.2), (2.0, 0.1)],
            }],
        };
        let svg = render_svg(&fig);
        assert_eq!(svg.matches("class=\"point\"").count(), 3);
        assert!(svg.contains("&lt;vs&gt;"));
        assert!(svg.starts_with("<svg"));
    }
}

//! Plain-text SVG charts drawn from metrics records.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{read_metrics_csv, MetricsRecord};
use crate::error::{Error, Result};

/// Canvas and plot-area layout shared by every chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotGeometry {
    pub width: f64,
    pub height: f64,
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
}

impl Default for PlotGeometry {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 360.0,
            left: 70.0,
            right: 20.0,
            top: 40.0,
            bottom: 50.0,
        }
    }
}

impl PlotGeometry {
    pub fn plot_width(&self) -> f64 {
        self.width - self.left - self.right
    }

    pub fn plot_height(&self) -> f64 {
        self.height - self.top - self.bottom
    }

    /// y coordinate of the plot's baseline.
    pub fn baseline(&self) -> f64 {
        self.height - self.bottom
    }
}

fn open(g: &PlotGeometry, title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = g.width,
        h = g.height
    )
    .unwrap();
    writeln!(s, r#"<rect width="{}" height="{}" fill="white"/>"#, g.width, g.height).unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        g.width / 2.0,
        title
    )
    .unwrap();
    writeln!(
        s,
        r#"<line class="axis" x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/><line class="axis" x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        l = g.left,
        t = g.top,
        b = g.baseline(),
        r = g.width - g.right
    )
    .unwrap();
    s
}

fn y_tick(s: &mut String, g: &PlotGeometry, y: f64, label: &str) {
    writeln!(
        s,
        r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
        g.left - 4.0,
        g.left,
        g.left - 6.0,
        y + 4.0
    )
    .unwrap();
}

/// Bars of height `fraction * plot_height`, one per value.
fn bars(s: &mut String, g: &PlotGeometry, fractions: &[f64], fill: &str) {
    let slot = g.plot_width() / fractions.len().max(1) as f64;
    for (i, &f) in fractions.iter().enumerate() {
        let h = f.clamp(0.0, 1.0) * g.plot_height();
        let x = g.left + slot * i as f64 + slot * 0.1;
        writeln!(
            s,
            r#"<rect class="bar" data-layer="{i}" x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{fill}"/>"#,
            g.baseline() - h,
            slot * 0.8
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">L{i}</text>"#,
            x + slot * 0.4,
            g.baseline() + 16.0
        )
        .unwrap();
    }
}

/// Final per-layer density on a linear `[0, 1]` axis.
pub fn density_svg(last: &MetricsRecord, g: &PlotGeometry) -> String {
    let mut s = open(g, &format!("Layer density (epoch {})", last.epoch));
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        y_tick(&mut s, g, g.baseline() - v * g.plot_height(), &format!("{v:.2}"));
    }
    let d: Vec<f64> = last.layers.iter().map(|l| l.density).collect();
    bars(&mut s, g, &d, "#4477aa");
    s.push_str("</svg>\n");
    s
}

/// Final per-layer active weight count on a log10 axis starting at 1.
pub fn active_params_svg(last: &MetricsRecord, g: &PlotGeometry) -> String {
    let mut s = open(g, &format!("Active parameters per layer (epoch {})", last.epoch));
    let active: Vec<usize> = last.layers.iter().map(|l| l.active()).collect();
    let max = active.iter().copied().max().unwrap_or(1).max(10) as f64;
    let decades = max.log10().ceil();
    for d in 0..=decades as usize {
        y_tick(
            &mut s,
            g,
            g.baseline() - d as f64 / decades * g.plot_height(),
            &format!("1e{d}"),
        );
    }
    let f: Vec<f64> = active
        .iter()
        .map(|&a| if a == 0 { 0.0 } else { (a as f64).log10() / decades })
        .collect();
    bars(&mut s, g, &f, "#cc6677");
    s.push_str("</svg>\n");
    s
}

/// Test accuracy per epoch on a `[0, 100]` axis.
pub fn accuracy_svg(records: &[MetricsRecord], g: &PlotGeometry) -> String {
    let mut s = open(g, "Test accuracy (%)");
    for t in 0..=5 {
        let v = t as f64 * 20.0;
        y_tick(&mut s, g, g.baseline() - v / 100.0 * g.plot_height(), &format!("{v}"));
    }
    let span = records.len().saturating_sub(1).max(1) as f64;
    let mut pts = String::new();
    for (i, r) in records.iter().enumerate() {
        let x = g.left + g.plot_width() * i as f64 / span;
        let y = g.baseline() - r.test_acc.clamp(0.0, 100.0) / 100.0 * g.plot_height();
        write!(pts, "{x:.2},{y:.2} ").unwrap();
        writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            g.baseline() + 16.0,
            r.epoch
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<polyline class="series" points="{}" fill="none" stroke="#228833" stroke-width="2"/>"##,
        pts.trim_end()
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Reads a metrics CSV and writes `density.svg`, `active_params.svg` and
/// `accuracy.svg` into `out_dir`.
pub fn emit_plots(csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_metrics_csv(csv)?;
    let last = records.last().ok_or(Error::Csv {
        line: 2,
        detail: "no epochs to plot".into(),
    })?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let g = PlotGeometry::default();
    let files = [
        ("density.svg", density_svg(last, &g)),
        ("active_params.svg", active_params_svg(last, &g)),
        ("accuracy.svg", accuracy_svg(&records, &g)),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let p = out_dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        })
        .collect()
}

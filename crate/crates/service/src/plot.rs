use std::fmt::Write as _;
use std::path::Path;

use sourceconf_core::evaluation::CurvePoint;
use sourceconf_core::{Error, Result};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [CurvePoint],
}

#[derive(Clone, Copy)]
pub enum Panel {
    PrecisionRecall,
    Roc,
}

impl Panel {
    fn axes(self) -> (&'static str, &'static str, &'static str) {
        match self {
            Panel::PrecisionRecall => ("Precision-Recall", "Recall", "Precision"),
            Panel::Roc => ("ROC", "False positive rate", "True positive rate"),
        }
    }

    fn xy(self, p: &CurvePoint) -> (f64, f64) {
        match self {
            Panel::PrecisionRecall => (p.recall, p.precision),
            Panel::Roc => (p.fpr, p.tpr),
        }
    }
}

fn px(x: f64, y: f64) -> (f64, f64) {
    (MARGIN + x * (WIDTH - 2.0 * MARGIN), HEIGHT - MARGIN - y * (HEIGHT - 2.0 * MARGIN))
}

/// Renders one panel with a line per series as SVG.
pub fn render(panel: Panel, series: &[Series]) -> String {
    let (title, xlabel, ylabel) = panel.axes();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, WIDTH / 2.0);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (x0, y0) = px(v, 0.0);
        let (x1, y1) = px(0.0, v);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{}" stroke="#eee"/>"##, px(v, 1.0).1);
        let _ = writeln!(s, r##"<line x1="{x1}" y1="{y1}" x2="{}" y2="{y1}" stroke="#eee"/>"##, px(1.0, v).0);
        let _ = writeln!(s, r#"<text x="{x0}" y="{}" text-anchor="middle">{v:.1}</text>"#, y0 + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, x1 - 6.0, y1 + 4.0);
    }
    let (ox, oy) = px(0.0, 0.0);
    let (ex, ey) = px(1.0, 1.0);
    let _ = writeln!(s, r#"<rect x="{ox}" y="{ey}" width="{}" height="{}" fill="none" stroke="black"/>"#, ex - ox, oy - ey);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, WIDTH / 2.0, HEIGHT - 14.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{ylabel}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (i, series) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        // Points are stored by descending threshold, which walks the curve from the origin side.
        let path: Vec<String> = series
            .points
            .iter()
            .map(|p| {
                let (x, y) = px(panel.xy(p).0, panel.xy(p).1);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        let ly = MARGIN + 16.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN - 150.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(series.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `pr.svg` and `roc.svg` under `dir`.
pub fn write_panels(series: &[Series], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut written = Vec::new();
    for (panel, name) in [(Panel::PrecisionRecall, "pr.svg"), (Panel::Roc, "roc.svg")] {
        let path = dir.join(name);
        std::fs::write(&path, render(panel, series)).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        written.push(path);
    }
    Ok(written)
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::{ATTRACT_COLUMNS, REPULSE_COLUMNS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    Attract,
    Repulse,
}

/// One polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub source: PathBuf,
    pub label: String,
    pub stroke: &'static str,
    pub dash: Option<&'static str>,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSummary {
    pub schema: Schema,
    pub polylines: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn bad(msg: String) -> Error {
    Error::Input(msg)
}

/// `lambda` from a manifest sitting next to the CSV, if any.
fn lambda_near(csv: &Path) -> Option<f64> {
    let dir = csv.parent()?;
    let text = fs::read_to_string(dir.join("manifest.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.pointer("/config/wrl/lambda")?.as_f64()
}

fn attract_style(lambda: Option<f64>) -> (&'static str, Option<&'static str>, String) {
    match lambda {
        Some(l) if l < 0.0 => ("#1f5fbf", None, format!("lambda = {l}")),
        Some(l) if l == 0.0 => ("#c0392b", Some("6 4"), "lambda = 0".into()),
        Some(l) => ("#2e8b57", Some("2 3"), format!("lambda = {l}")),
        None => ("#666666", None, "unlabelled".into()),
    }
}

fn read_csv(path: &Path) -> Result<(Schema, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let schema = if header == ATTRACT_COLUMNS {
        Schema::Attract
    } else if header == REPULSE_COLUMNS {
        Schema::Repulse
    } else if header.iter().all(|h| h.is_empty()) {
        return Err(bad(format!("{} is empty", path.display())));
    } else {
        return Err(bad(format!("{} has unrecognised columns {header:?}", path.display())));
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad(format!("{} has no data rows", path.display())));
    }
    Ok((schema, rows))
}

/// Reads every CSV and turns it into polylines: return against episode
/// for attraction runs, and both policies' mean x against iteration for
/// repulsion runs. All files must share one schema.
pub fn load_series(paths: &[PathBuf]) -> Result<(Schema, Vec<Series>)> {
    if paths.is_empty() {
        return Err(bad("no CSV files given".into()));
    }
    let mut schema = None;
    let mut out = Vec::new();
    for p in paths {
        let (s, rows) = read_csv(p)?;
        if *schema.get_or_insert(s) != s {
            return Err(bad(format!("{} does not share the schema of {}", p.display(), paths[0].display())));
        }
        match s {
            Schema::Attract => {
                let (stroke, dash, label) = attract_style(lambda_near(p));
                out.push(Series {
                    source: p.clone(),
                    label,
                    stroke,
                    dash,
                    points: rows.iter().map(|r| (r[1], r[2])).collect(),
                });
            }
            Schema::Repulse => {
                for (col, stroke, dash, who) in [(5, "#1f5fbf", None, "a"), (6, "#d35400", Some("6 4"), "b")] {
                    out.push(Series {
                        source: p.clone(),
                        label: format!("policy {who}"),
                        stroke,
                        dash,
                        points: rows.iter().map(|r| (r[1], r[col])).collect(),
                    });
                }
            }
        }
    }
    Ok((schema.expect("at least one file"), out))
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static SVG line chart of the series.
pub fn render_svg(schema: Schema, series: &[Series]) -> (String, PlotSummary) {
    let x_range = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let y_range = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x_range.0) / (x_range.1 - x_range.0) * pw;
    let sy = |y: f64| TOP + (y_range.1 - y) / (y_range.1 - y_range.0) * ph;
    let (xlabel, ylabel) = match schema {
        Schema::Attract => ("episode", "return"),
        Schema::Repulse => ("iteration", "mean x"),
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = x_range.0 + t * (x_range.1 - x_range.0);
        let yv = y_range.0 + t * (y_range.1 - y_range.0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.1}" y1="{TOP}" x2="{px:.1}" y2="{:.1}" stroke="#ddd"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            py + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xlabel}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{ylabel}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for s in series {
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let dash = s.dash.map(|d| format!(r#" stroke-dasharray="{d}""#)).unwrap_or_default();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash} data-source="{}" points="{}"/>"#,
            s.stroke,
            esc(&s.source.display().to_string()),
            pts.join(" ")
        );
    }
    let mut seen: Vec<(&str, &str, Option<&str>)> = Vec::new();
    for s in series {
        if !seen.iter().any(|e| e.0 == s.label) {
            seen.push((&s.label, s.stroke, s.dash));
        }
    }
    for (i, (label, stroke, dash)) in seen.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = LEFT + pw + 14.0;
        let dash = dash.map(|d| format!(r#" stroke-dasharray="{d}""#)).unwrap_or_default();
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{stroke}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
            x + 24.0,
            x + 30.0,
            y + 4.0,
            esc(label)
        );
    }
    svg.push_str("</svg>\n");
    let summary = PlotSummary {
        schema,
        polylines: series.len(),
        x_range,
        y_range,
    };
    (svg, summary)
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders `csvs` to `out`. Nothing is written unless every input reads
/// cleanly.
pub fn plot(csvs: &[PathBuf], out: &Path) -> Result<PlotSummary> {
    let (schema, series) = load_series(csvs)?;
    let (svg, summary) = render_svg(schema, &series);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, svg)?;
    Ok(summary)
}

//! SVG renderings of loss curves and attention timelines.

use std::fmt::Write;

use crate::error::{invalid, Error, Result};
use crate::training::METRICS_HEADER;

const WIDTH: f64 = 720.0;
const PANEL: f64 = 160.0;
const MARGIN: f64 = 40.0;

/// Parses a metrics CSV into `(column name, values)` for every loss column.
pub fn parse_metrics(csv: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| invalid!("metrics CSV is empty"))?
        .split(',')
        .map(str::trim)
        .collect();
    let wanted: Vec<&str> = METRICS_HEADER.split(',').collect();
    let mut index = Vec::new();
    for name in &wanted {
        let i = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid!("metrics CSV is missing column {name}"))?;
        index.push(i);
    }
    let mut columns: Vec<(String, Vec<f64>)> =
        wanted.iter().map(|n| (n.to_string(), Vec::new())).collect();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        for (k, &i) in index.iter().enumerate() {
            let cell = cells.get(i).ok_or_else(|| {
                Error::parse(
                    "metrics CSV",
                    format!("row {} has {} cells", row + 2, cells.len()),
                )
            })?;
            let v: f64 = cell.parse().map_err(|_| {
                Error::parse(
                    "metrics CSV",
                    format!("row {}: {cell:?} is not a number", row + 2),
                )
            })?;
            columns[k].1.push(v);
        }
    }
    Ok(columns)
}

/// One panel per loss component, iteration on the x axis.
pub fn loss_curves_svg(csv: &str) -> Result<String> {
    let columns = parse_metrics(csv)?;
    let iterations = &columns[0].1;
    let panels = &columns[1..];
    let height = MARGIN + panels.len() as f64 * (PANEL + MARGIN);
    let mut svg = open_svg(height);
    let (x0, x1) = range(iterations);
    for (p, (name, values)) in panels.iter().enumerate() {
        let top = MARGIN + p as f64 * (PANEL + MARGIN);
        let (y0, y1) = range(values);
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN}" y="{top}" width="{}" height="{PANEL}" fill="none" stroke="#999"/>"##,
            WIDTH - 2.0 * MARGIN
        );
        let _ = writeln!(
            svg,
            r#"<text x="{MARGIN}" y="{}" font-size="12" font-family="sans-serif">{name}  [{y0:.4}, {y1:.4}]</text>"#,
            top - 6.0
        );
        let points: Vec<String> = iterations
            .iter()
            .zip(values)
            .map(|(&x, &y)| {
                let px = MARGIN + scale(x, x0, x1) * (WIDTH - 2.0 * MARGIN);
                let py = top + PANEL - scale(y, y0, y1) * PANEL;
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
            points.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Rows of one timeline strip: ground truth then each model's attention.
pub struct TimelineRow<'a> {
    pub label: &'a str,
    pub active: Vec<bool>,
}

/// Stacked strips, one per row, with active segments filled.
pub fn timeline_svg(video_id: &str, rows: &[TimelineRow]) -> String {
    const STRIP: f64 = 24.0;
    const LABEL: f64 = 120.0;
    let height = MARGIN + rows.len() as f64 * (STRIP + 8.0) + 8.0;
    let mut svg = open_svg(height);
    let _ = writeln!(
        svg,
        r#"<text x="8" y="24" font-size="14" font-family="sans-serif">{video_id}</text>"#
    );
    let span = WIDTH - LABEL - 8.0;
    for (r, row) in rows.iter().enumerate() {
        let y = MARGIN + r as f64 * (STRIP + 8.0);
        let _ = writeln!(
            svg,
            r##"<g class="strip"><text x="8" y="{}" font-size="12" font-family="sans-serif">{}</text><rect x="{LABEL}" y="{y}" width="{span}" height="{STRIP}" fill="#eee"/>"##,
            y + 16.0,
            row.label
        );
        let n = row.active.len().max(1) as f64;
        let w = span / n;
        for (t, &on) in row.active.iter().enumerate() {
            if on {
                let _ = writeln!(
                    svg,
                    r##"<rect x="{:.2}" y="{y}" width="{:.2}" height="{STRIP}" fill="#d62728"/>"##,
                    LABEL + t as f64 * w,
                    w
                );
            }
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

fn open_svg(height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" viewBox=\"0 0 {WIDTH} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn range(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.5
    }
}

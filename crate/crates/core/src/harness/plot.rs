//! Standalone log-log SVG plots of sweep results.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::slope::{fit_loglog_slope, group_means};
use super::ResultsTable;
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

/// Column overlaid as the bound curve when present.
const BOUND_COLUMN: &str = "theorem1c";

struct LogScale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl LogScale {
    fn new(values: impl Iterator<Item = f64>, px_lo: f64, px_hi: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v.log10());
            hi = hi.max(v.log10());
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
            px_lo,
            px_hi,
        }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v.log10() - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    /// Decade ticks inside the range; the range ends when no decade fits.
    fn ticks(&self) -> Vec<f64> {
        let mut out: Vec<f64> = (self.lo.ceil() as i32..=self.hi.floor() as i32)
            .map(|e| 10f64.powi(e))
            .collect();
        if out.is_empty() {
            out = vec![10f64.powf(self.lo), 10f64.powf(self.hi)];
        }
        out
    }
}

fn fmt_tick(v: f64) -> String {
    if (1e-3..1e4).contains(&v) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.0e}")
    }
}

fn polyline(points: &[(f64, f64)], class: &str, extra: &str) -> String {
    let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "  <polyline class=\"{class}\" fill=\"none\" {extra} points=\"{}\"/>\n",
        coords.join(" ")
    )
}

/// Renders the plot of `response` against the axis as an SVG string.
pub fn render_plot(table: &ResultsTable, axis: &str, response: &str) -> Result<String> {
    let ok = table.ok_rows();
    let xs = ok.numeric("value")?;
    let ys = ok.numeric(response)?;
    let points: Vec<(f64, f64)> = xs
        .iter()
        .zip(&ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (*x, *y))
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyData(format!("no positive `{response}` values to plot")));
    }
    let (means, _) = group_means(&xs, &ys)?;
    let bound = match ok.column_index(BOUND_COLUMN) {
        Ok(_) => group_means(&xs, &ok.numeric(BOUND_COLUMN)?)?.0,
        Err(_) => Vec::new(),
    };
    let fit = fit_loglog_slope(&xs, &ys).ok();

    let sx = LogScale::new(points.iter().map(|p| p.0), MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let sy = LogScale::new(
        points.iter().map(|p| p.1).chain(bound.iter().map(|p| p.1)),
        HEIGHT - MARGIN_BOTTOM,
        MARGIN_TOP,
    );

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let (x0, x1, y0, y1) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT, HEIGHT - MARGIN_BOTTOM, MARGIN_TOP);
    let _ = writeln!(
        svg,
        "  <path class=\"axes\" d=\"M{x0},{y1} L{x0},{y0} L{x1},{y0}\" stroke=\"black\" fill=\"none\"/>"
    );
    for t in sx.ticks() {
        let px = sx.map(t);
        let _ = writeln!(
            svg,
            "  <text class=\"tick\" x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            y0 + 18.0,
            fmt_tick(t)
        );
    }
    for t in sy.ticks() {
        let py = sy.map(t);
        let _ = writeln!(
            svg,
            "  <text class=\"tick\" x=\"{:.2}\" y=\"{py:.2}\" text-anchor=\"end\">{}</text>",
            x0 - 6.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        svg,
        "  <text class=\"label\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{axis} (log)</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        "  <text class=\"label\" x=\"20\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.2})\">{response} (log)</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (x, y) in &points {
        let _ = writeln!(
            svg,
            "  <circle class=\"point\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"steelblue\" fill-opacity=\"0.5\"/>",
            sx.map(*x),
            sy.map(*y)
        );
    }
    let mapped: Vec<(f64, f64)> = means.iter().map(|(x, y)| (sx.map(*x), sy.map(*y))).collect();
    svg.push_str(&polyline(&mapped, "mean-line", "stroke=\"navy\" stroke-width=\"2\""));
    if bound.len() >= 2 {
        let mapped: Vec<(f64, f64)> = bound
            .iter()
            .filter(|p| p.1 > 0.0)
            .map(|(x, y)| (sx.map(*x), sy.map(*y)))
            .collect();
        svg.push_str(&polyline(
            &mapped,
            "bound-line",
            "stroke=\"firebrick\" stroke-dasharray=\"6 4\"",
        ));
    }
    let note = match &fit {
        Some(f) => format!("slope = {:.3}, r² = {:.3}", f.slope, f.r_squared),
        None => "slope unavailable".to_string(),
    };
    let _ = writeln!(
        svg,
        "  <text class=\"slope\" x=\"{:.2}\" y=\"{:.2}\">{note}</text>",
        x0 + 10.0,
        y1 - 12.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Reads a results CSV and writes the plot to `out`.
pub fn emit_plot(csv: &Path, axis: &str, response: &str, out: &Path) -> Result<()> {
    let table = ResultsTable::load(csv)?;
    let svg = render_plot(&table, axis, response)?;
    fs::write(out, svg).map_err(|e| Error::io(out, e))
}

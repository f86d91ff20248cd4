//! Static SVG chart: windowed accuracy, smoothed flip score and weight norm,
//! one polyline per trace in each panel, dashed verticals at triggers.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::harness::window_means;

use super::trace::TraceFile;

const WIDTH: f64 = 960.0;
const PANEL_H: f64 = 200.0;
const GAP: f64 = 40.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const MAX_POINTS: usize = 1500;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Series {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

/// Bucket means so long traces stay small; x is the bucket centre.
fn downsample(xs: &[f64], ys: &[f64]) -> Series {
    let n = xs.len();
    let per = n.div_ceil(MAX_POINTS).max(1);
    Series {
        xs: window_means(xs, per),
        ys: window_means(ys, per),
    }
}

fn extent(series: &[&Series]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in series.iter().flat_map(|s| &s.ys).filter(|v| v.is_finite()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

pub struct Labeled<'a> {
    pub label: String,
    pub trace: &'a TraceFile,
}

/// Render the chart. Accuracy is averaged over windows of `window` steps.
pub fn render_svg(traces: &[Labeled], window: usize) -> Result<String> {
    if traces.is_empty() {
        return Err(Error::Input("nothing to plot".into()));
    }
    if let Some(t) = traces.iter().find(|t| t.trace.rows.is_empty()) {
        return Err(Error::Format(format!("trace {} has no rows", t.label)));
    }
    let window = window.max(1);
    let x_max = traces
        .iter()
        .flat_map(|t| t.trace.rows.last())
        .map(|r| r.step as f64)
        .fold(1.0f64, f64::max);
    let plot_w = WIDTH - LEFT - RIGHT;
    let sx = |x: f64| LEFT + plot_w * x / x_max;

    let mut panels: [Vec<Series>; 3] = Default::default();
    for t in traces {
        let rows = &t.trace.rows;
        let steps: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
        let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        panels[0].push(Series {
            xs: window_means(&steps, window),
            ys: window_means(&acc, window),
        });
        let lf: Vec<f64> = rows.iter().map(|r| r.lf_smoothed).collect();
        panels[1].push(downsample(&steps, &lf));
        let norm: Vec<f64> = rows.iter().map(|r| r.weight_norm).collect();
        panels[2].push(downsample(&steps, &norm));
    }
    let titles = [format!("accuracy (window {window})"), "smoothed label flip".into(), "weight L2 norm".into()];

    let height = TOP + 3.0 * PANEL_H + 2.0 * GAP + 40.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (i, t) in traces.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        writeln!(
            s,
            r#"<text x="{:.1}" y="20" fill="{c}">{}</text>"#,
            LEFT + 220.0 * i as f64,
            escape(&t.label)
        )
        .unwrap();
    }
    for (p, series) in panels.iter().enumerate() {
        let top = TOP + p as f64 * (PANEL_H + GAP);
        let (lo, hi) = extent(&series.iter().collect::<Vec<_>>());
        let sy = |y: f64| top + PANEL_H * (1.0 - (y - lo) / (hi - lo));
        writeln!(
            s,
            r##"<g class="panel" data-panel="{p}"><rect x="{LEFT}" y="{top}" width="{plot_w}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
        )
        .unwrap();
        writeln!(s, r#"<text x="{LEFT}" y="{:.1}">{}</text>"#, top - 6.0, titles[p]).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.4}</text>"#, LEFT - 4.0, top + 10.0, hi).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.4}</text>"#, LEFT - 4.0, top + PANEL_H, lo).unwrap();
        for (i, ser) in series.iter().enumerate() {
            let pts: Vec<String> = ser
                .xs
                .iter()
                .zip(&ser.ys)
                .filter(|(_, y)| y.is_finite())
                .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            writeln!(
                s,
                r#"<polyline class="series" fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
                COLORS[i % COLORS.len()],
                pts.join(" ")
            )
            .unwrap();
        }
        writeln!(s, "</g>").unwrap();
    }
    let bottom = TOP + 3.0 * PANEL_H + 2.0 * GAP;
    for (i, t) in traces.iter().enumerate() {
        for r in t.trace.rows.iter().filter(|r| r.triggered) {
            let x = sx(r.step as f64);
            writeln!(
                s,
                r#"<line class="trigger" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{bottom}" stroke="{}" stroke-opacity="0.5" stroke-dasharray="3,3"/>"#,
                COLORS[i % COLORS.len()]
            )
            .unwrap();
        }
    }
    writeln!(s, r#"<text x="{LEFT}" y="{:.1}">step 0</text>"#, bottom + 20.0).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">step {x_max}</text>"#, WIDTH - RIGHT, bottom + 20.0).unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

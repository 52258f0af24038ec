//! Hand-written SVG learning curves: training loss and held-out accuracy
//! against step, in two stacked panels sharing the x axis.

use std::fmt::Write as _;

use ttm_core::train::MetricRow;

const WIDTH: f64 = 640.0;
const PANEL: f64 = 220.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const GAP: f64 = 50.0;

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    /// Degenerate ranges are widened so points land mid-panel.
    fn new(lo: f64, hi: f64) -> Self {
        if hi - lo > 1e-12 {
            Axis { lo, hi }
        } else {
            Axis { lo: lo - 0.5, hi: hi + 0.5 }
        }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn panel(svg: &mut String, rows: &[MetricRow], top: f64, label: &str, y: Axis, value: impl Fn(&MetricRow) -> f64, colour: &str) {
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let x = Axis::new(0.0, rows.iter().map(|r| r.step).max().unwrap_or(1) as f64);
    let px = |s: f64| MARGIN_L + x.frac(s) * plot_w;
    let py = |v: f64| top + (1.0 - y.frac(v)) * PANEL;

    writeln!(
        svg,
        r#"<rect x="{MARGIN_L}" y="{top}" width="{plot_w}" height="{PANEL}" fill="none" stroke="gray"/>"#
    )
    .unwrap();
    for (v, anchor) in [(y.lo, top + PANEL), (y.hi, top)] {
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
            MARGIN_L - 6.0,
            anchor + 4.0,
            fmt_tick(v)
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{MARGIN_L}" y="{}" font-size="13">{label}</text>"#,
        top - 8.0
    )
    .unwrap();
    let points: Vec<String> = rows
        .iter()
        .filter(|r| value(r).is_finite())
        .map(|r| format!("{:.2},{:.2}", px(r.step as f64), py(value(r))))
        .collect();
    writeln!(
        svg,
        r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
        points.join(" ")
    )
    .unwrap();
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn learning_curve(rows: &[MetricRow], title: &str) -> String {
    let height = MARGIN_T + 2.0 * PANEL + GAP + 40.0;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="20" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();

    let losses = rows.iter().map(|r| r.loss).filter(|v| v.is_finite());
    let (lo, hi) = losses.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let loss_axis = if lo.is_finite() { Axis::new(lo.min(0.0), hi) } else { Axis::new(0.0, 1.0) };
    panel(&mut svg, rows, MARGIN_T, "train loss", loss_axis, |r| r.loss, "#1f77b4");
    panel(
        &mut svg,
        rows,
        MARGIN_T + PANEL + GAP,
        "held-out accuracy",
        Axis::new(0.0, 1.0),
        |r| r.accuracy,
        "#d62728",
    );
    let last = rows.iter().map(|r| r.step).max().unwrap_or(0);
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end">step {last}</text>"#,
        WIDTH - MARGIN_R,
        height - 12.0
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, loss: f64, accuracy: f64) -> MetricRow {
        MetricRow { step, loss, accuracy, lr: 1e-3 }
    }

    #[test]
    fn one_polyline_point_per_row_and_panel() {
        let rows = [row(10, 2.0, 0.1), row(20, 1.0, 0.5), row(30, 0.5, 0.9)];
        let svg = learning_curve(&rows, "copy <T=4>");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("copy &lt;T=4&gt;"));
        let lines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
        assert_eq!(lines.len(), 2);
        for l in lines {
            let pts = l.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
            assert_eq!(pts.split(' ').count(), 3);
        }
    }

    #[test]
    fn accuracy_maps_onto_fixed_unit_axis() {
        let svg = learning_curve(&[row(1, 1.0, 1.0), row(2, 1.0, 0.0)], "t");
        let acc = svg.lines().filter(|l| l.starts_with("<polyline")).nth(1).unwrap();
        let top = MARGIN_T + PANEL + GAP;
        assert!(acc.contains(&format!("{:.2},{top:.2}", MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0)));
        assert!(acc.contains(&format!("{:.2},{:.2}", WIDTH - MARGIN_R, top + PANEL)));
    }
}

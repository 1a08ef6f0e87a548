//! Minimal deterministic SVG charts: fixed canvas, no embedded fonts,
//! coordinates and labels printed at fixed precision.

use std::fmt::Write;

use crate::dynamics::{Crossing, TrainingRun};
use crate::esfit::{BatchMetrics, PiecewiseEs};
use crate::losslaw::EsPoint;
use crate::scheduler::{BatchCurve, Schedule};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Style {
    Line,
    Dots,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

/// A labelled point drawn on top of the series.
#[derive(Debug, Clone)]
pub struct Marker {
    pub class: &'static str,
    pub x: f64,
    pub y: f64,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_log: bool,
    pub y_log: bool,
    pub series: Vec<Series>,
    pub markers: Vec<Marker>,
}

/// Number formatting used for every label.
pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 {
        "0".to_string()
    } else if (1e-2..1e5).contains(&a) {
        format!("{v:.3}")
    } else {
        format!("{v:.3e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Scale {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Scale {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let t = |v: f64| if log { v.log10() } else { v };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            lo = lo.min(t(v));
            hi = hi.max(t(v));
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if lo.abs() > 0.0 { 0.05 * lo.abs() } else { 0.5 };
            (lo, hi) = (lo - pad, hi + pad);
        }
        let pad = 0.04 * (hi - lo);
        Self { lo: lo - pad, hi: hi + pad, log }
    }

    /// Position in `[0, 1]`; `None` for values a log axis cannot show.
    fn unit(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let t = if self.log { v.log10() } else { v };
        Some((t - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self) -> Vec<f64> {
        (0..5)
            .map(|i| {
                let t = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                if self.log {
                    10f64.powf(t)
                } else {
                    t
                }
            })
            .collect()
    }
}

impl Chart {
    pub fn render(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter().copied()).chain(self.markers.iter().map(|m| (m.x, m.y)));
        let xs = Scale::fit(pts().map(|p| p.0), self.x_log);
        let ys = Scale::fit(pts().map(|p| p.1), self.y_log);
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let px = |x: f64| xs.unit(x).map(|u| LEFT + u * pw);
        let py = |y: f64| ys.unit(y).map(|u| TOP + (1.0 - u) * ph);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(&self.title));
        let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for t in xs.ticks() {
            if let Some(x) = px(t) {
                let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
                let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, fmt_num(t));
            }
        }
        for t in ys.ticks() {
            if let Some(y) = py(t) {
                let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 5.0);
                let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 8.0, y + 4.0, fmt_num(t));
            }
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 15.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mapped: Vec<(f64, f64)> =
                series.points.iter().filter_map(|&(x, y)| Some((px(x)?, py(y)?))).collect();
            match series.style {
                Style::Line => {
                    let path: Vec<String> = mapped.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
                }
                Style::Dots => {
                    for (x, y) in &mapped {
                        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
                    }
                }
            }
            let ly = TOP + 14.0 * i as f64 + 8.0;
            let lx = WIDTH - RIGHT + 12.0;
            let _ = writeln!(s, r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{color}"/>"#, ly - 8.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 14.0, escape(&series.name));
        }
        for m in &self.markers {
            if let (Some(x), Some(y)) = (px(m.x), py(m.y)) {
                let _ = writeln!(
                    s,
                    r#"<circle class="{}" data-x="{}" data-y="{}" cx="{x:.2}" cy="{y:.2}" r="6" fill="none" stroke="black" stroke-width="2"/>"#,
                    m.class,
                    fmt_num(m.x),
                    fmt_num(m.y)
                );
                let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 8.0, y - 8.0, escape(&m.label));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Loss against tokens for each run, with crossing markers.
pub fn loss_plot(runs: &[TrainingRun], crossings: &[Crossing]) -> String {
    let series = runs
        .iter()
        .map(|r| {
            let stride = (r.records.len() / 400).max(1);
            let points = r
                .records
                .iter()
                .enumerate()
                .filter(|(i, _)| i % stride == 0 || *i + 1 == r.records.len())
                .map(|(_, x)| (x.tokens, x.loss))
                .collect();
            Series { name: format!("B = {}", fmt_num(r.batch_size)), points, style: Style::Line }
        })
        .collect();
    let markers = crossings
        .iter()
        .map(|c| Marker { class: "crossing", x: c.tokens_a, y: c.loss, label: format!("L = {}", fmt_num(c.loss)) })
        .collect();
    Chart {
        title: "Loss against consumed tokens".into(),
        x_label: "tokens".into(),
        y_label: "loss".into(),
        x_log: true,
        y_log: false,
        series,
        markers,
    }
    .render()
}

/// Log-log `E(S)`: observations, the fitted piecewise curve and its minimum.
pub fn es_plot(model: &PiecewiseEs, points: &[EsPoint], title: &str) -> String {
    let s_hi = points.iter().map(|p| p.s).fold(model.s_2 * 1.5, f64::max) * 1.1;
    let s_lo = model.s_min * 1.02;
    let n = 200;
    let curve: Vec<(f64, f64)> = (0..=n)
        .filter_map(|i| {
            let s = s_lo * (s_hi / s_lo).powf(i as f64 / n as f64);
            model.eval(s).ok().map(|e| (s, e))
        })
        .collect();
    Chart {
        title: title.into(),
        x_label: "steps S".into(),
        y_label: "tokens E".into(),
        x_log: true,
        y_log: true,
        series: vec![
            Series { name: "observed".into(), points: points.iter().map(|p| (p.s, p.e)).collect(), style: Style::Dots },
            Series { name: "piecewise fit".into(), points: curve, style: Style::Line },
        ],
        markers: vec![Marker {
            class: "min-marker",
            x: model.s_opt,
            y: model.e_min,
            label: format!("({}, {})", fmt_num(model.s_opt), fmt_num(model.e_min)),
        }],
    }
    .render()
}

/// `B_min` and `B_opt` against target loss.
pub fn trend_plot(metrics: &[BatchMetrics]) -> String {
    let mut m = metrics.to_vec();
    m.sort_by(|a, b| a.target_loss.total_cmp(&b.target_loss));
    Chart {
        title: "Batch sizes against target loss".into(),
        x_label: "target loss".into(),
        y_label: "batch size".into(),
        x_log: false,
        y_log: true,
        series: vec![
            Series { name: "B_min".into(), points: m.iter().map(|x| (x.target_loss, x.b_min)).collect(), style: Style::Line },
            Series { name: "B_opt".into(), points: m.iter().map(|x| (x.target_loss, x.b_opt)).collect(), style: Style::Line },
        ],
        markers: Vec::new(),
    }
    .render()
}

/// Schedule staircase, optionally over the curve it was built from.
pub fn schedule_plot(schedule: &Schedule, curve: Option<&dyn BatchCurve>) -> String {
    let mut stairs = Vec::new();
    let mut prev = 0.0;
    for e in &schedule.entries {
        stairs.push((prev, e.batch));
        stairs.push((e.tokens, e.batch));
        prev = e.tokens;
    }
    let mut series = vec![Series { name: "schedule".into(), points: stairs, style: Style::Line }];
    if let Some(c) = curve {
        let end = schedule.entries.last().map(|e| e.tokens).unwrap_or(1.0);
        let points = (0..=100).map(|i| end * i as f64 / 100.0).map(|d| (d, c.batch_at(d))).collect();
        series.push(Series { name: "f(N, D)".into(), points, style: Style::Line });
    }
    Chart {
        title: "Batch-size schedule".into(),
        x_label: "tokens D".into(),
        y_label: "batch size".into(),
        x_log: false,
        y_log: false,
        series,
        markers: Vec::new(),
    }
    .render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esfit::{from_free_params, FreeParams};

    #[test]
    fn es_plot_marks_the_vertex() {
        let p = from_free_params(&FreeParams { s_min: 100.0, s_1: 150.0, s_opt: 200.0, s_2: 300.0, c: 0.04, e_min: 400.0 })
            .unwrap();
        let pts: Vec<EsPoint> = [120.0, 180.0, 250.0, 400.0]
            .iter()
            .map(|&s| EsPoint { s, e: p.eval(s).unwrap(), b: p.eval(s).unwrap() / s })
            .collect();
        let svg = es_plot(&p, &pts, "example");
        assert!(svg.contains(r#"class="min-marker" data-x="200.000" data-y="400.000""#), "{svg}");
        assert_eq!(svg, es_plot(&p, &pts, "example"));
    }

    #[test]
    fn labels_use_fixed_precision() {
        assert_eq!(fmt_num(3.45678), "3.457");
        assert_eq!(fmt_num(1.25e9), "1.250e9");
        assert_eq!(fmt_num(0.0), "0");
    }
}

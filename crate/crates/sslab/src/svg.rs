//! Static SVG line charts with shaded mean ± std bands.

use std::fmt::Write;
use std::fs;
use std::path::Path;

use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<ChartPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Logarithmic x axis; every x must then be positive.
    pub log_x: bool,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Short, stable tick label.
fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn unit(&self, v: f64) -> f64 {
        let (v, lo, hi) = if self.log { (v.log10(), self.lo.log10(), self.hi.log10()) } else { (v, self.lo, self.hi) };
        if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let mut t = Vec::new();
            let (a, b) = (self.lo.log10().floor() as i32, self.hi.log10().ceil() as i32);
            for e in a..=b {
                for m in [1.0, 2.0, 5.0] {
                    let v = m * 10f64.powi(e);
                    if v >= self.lo * (1.0 - 1e-9) && v <= self.hi * (1.0 + 1e-9) {
                        t.push(v);
                    }
                }
            }
            if t.is_empty() {
                t.push(self.lo);
            }
            t
        } else {
            let step = nice_step(self.hi - self.lo);
            let first = (self.lo / step - 1e-9).ceil() as i64;
            let last = (self.hi / step + 1e-9).floor() as i64;
            (first..=last).map(|k| k as f64 * step).collect()
        }
    }
}

/// Tick spacing of 1, 2 or 5 times a power of ten giving about five ticks.
fn nice_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let m = raw / mag;
    let f = if m <= 1.0 {
        1.0
    } else if m <= 2.0 {
        2.0
    } else if m <= 5.0 {
        5.0
    } else {
        10.0
    };
    f * mag
}

impl Chart {
    fn check(&self) -> AppResult<()> {
        if self.series.is_empty() {
            return Err(AppError::Format("chart has no series".into()));
        }
        for s in &self.series {
            if s.points.is_empty() {
                return Err(AppError::Format(format!("series {} is empty", s.name)));
            }
            if s.points.windows(2).any(|w| !(w[0].x < w[1].x)) {
                return Err(AppError::Format(format!("series {} x values are not strictly ascending", s.name)));
            }
            for p in &s.points {
                if !p.x.is_finite() || (self.log_x && p.x <= 0.0) {
                    return Err(AppError::Format(format!("series {} has an unusable x value {}", s.name, p.x)));
                }
            }
        }
        Ok(())
    }

    fn finite_points(&self) -> impl Iterator<Item = &ChartPoint> {
        self.series.iter().flat_map(|s| &s.points).filter(|p| p.mean.is_finite())
    }

    /// Renders the chart. Points with a non-finite mean are skipped; a
    /// non-finite std draws no band.
    pub fn render(&self) -> AppResult<String> {
        self.check()?;
        let xs: Vec<f64> = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.x)).collect();
        let x_axis = Axis {
            lo: xs.iter().copied().fold(f64::INFINITY, f64::min),
            hi: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            log: self.log_x,
        };
        let band = |p: &ChartPoint| if p.std.is_finite() { p.std } else { 0.0 };
        let mut y_lo = self.finite_points().map(|p| p.mean - band(p)).fold(f64::INFINITY, f64::min);
        let mut y_hi = self.finite_points().map(|p| p.mean + band(p)).fold(f64::NEG_INFINITY, f64::max);
        if !y_lo.is_finite() {
            (y_lo, y_hi) = (0.0, 1.0);
        }
        if y_hi - y_lo < 1e-9 {
            y_lo -= 0.5;
            y_hi += 0.5;
        }
        // Widen to whole tick steps so the frame starts and ends on a tick.
        let step = nice_step(y_hi - y_lo);
        let y_axis = Axis {
            lo: (y_lo / step).floor() * step,
            hi: (y_hi / step).ceil() * step,
            log: false,
        };
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let px = |x: f64| LEFT + x_axis.unit(x) * pw;
        let py = |y: f64| TOP + (1.0 - y_axis.unit(y)) * ph;

        let mut o = String::new();
        let _ = writeln!(o, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            o,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(o, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            o,
            r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
        );
        for t in x_axis.ticks() {
            let x = px(t);
            let _ = writeln!(
                o,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                tick_label(t)
            );
        }
        for t in y_axis.ticks() {
            let y = py(t);
            let _ = writeln!(
                o,
                r#"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                LEFT - 5.0,
                LEFT - 8.0,
                y + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 15.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            o,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<&ChartPoint> = s.points.iter().filter(|p| p.mean.is_finite()).collect();
            let _ = writeln!(o, r#"<g class="series" data-name="{}">"#, escape(&s.name));
            if pts.len() > 1 && pts.iter().any(|p| band(p) > 0.0) {
                let upper = pts.iter().map(|p| format!("{:.1},{:.1}", px(p.x), py(p.mean + band(p))));
                let lower = pts.iter().rev().map(|p| format!("{:.1},{:.1}", px(p.x), py(p.mean - band(p))));
                let poly: Vec<String> = upper.chain(lower).collect();
                let _ = writeln!(
                    o,
                    r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                    poly.join(" ")
                );
            } else {
                for p in pts.iter().filter(|p| band(p) > 0.0) {
                    let _ = writeln!(
                        o,
                        r#"<line class="band" x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}" stroke-opacity="0.4" stroke-width="6"/>"#,
                        py(p.mean + band(p)),
                        py(p.mean - band(p)),
                        x = px(p.x)
                    );
                }
            }
            if pts.len() > 1 {
                let line: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", px(p.x), py(p.mean))).collect();
                let _ = writeln!(
                    o,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    line.join(" ")
                );
            }
            for p in &pts {
                let _ = writeln!(
                    o,
                    r#"<circle class="marker" cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#,
                    px(p.x),
                    py(p.mean)
                );
            }
            let ly = TOP + 10.0 + 20.0 * k as f64;
            let lx = WIDTH - RIGHT + 15.0;
            let _ = writeln!(
                o,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 20.0,
                lx + 25.0,
                ly + 4.0,
                escape(&s.name)
            );
            let _ = writeln!(o, "</g>");
        }
        let _ = writeln!(o, "</svg>");
        Ok(o)
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        let text = self.render()?;
        fs::write(path, text).map_err(|e| AppError::io(path, e))
    }
}

/// Mean and sample standard deviation of the finite values; NaN mean when
/// none are finite.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

//! Minimal, deterministic SVG plots. Coordinates are printed with two
//! decimals so reruns produce identical bytes.

use std::fmt::Write;

pub const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

const W: f64 = 520.0;
const H: f64 = 380.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pads a degenerate or inverted range so it can be drawn.
pub fn span(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn data_range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = span(lo, hi);
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

pub struct Plot {
    title: String,
    x_label: String,
    y_label: String,
    x: (f64, f64),
    y: (f64, f64),
    body: String,
    legend: Vec<(String, String)>,
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        Plot {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            x: span(x.0, x.1),
            y: span(y.0, y.1),
            body: String::new(),
            legend: Vec::new(),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn path(&self, pts: &[(f64, f64)]) -> String {
        pts.iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn points(&mut self, pts: &[(f64, f64)], color: &str, radius: f64) {
        for &(x, y) in pts {
            if x.is_finite() && y.is_finite() {
                let _ = write!(
                    self.body,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="{color}" fill-opacity="0.6"/>"#,
                    self.px(x),
                    self.py(y)
                );
            }
        }
    }

    pub fn line(&mut self, pts: &[(f64, f64)], color: &str, width: f64, opacity: f64) {
        let _ = write!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
            self.path(pts)
        );
    }

    pub fn polygon(&mut self, pts: &[(f64, f64)], color: &str) {
        let _ = write!(
            self.body,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.12" stroke="{color}" stroke-width="1.5"/>"#,
            self.path(pts)
        );
    }

    /// Bars over consecutive `edges`.
    pub fn bars(&mut self, edges: &[f64], heights: &[f64], color: &str) {
        for (i, &h) in heights.iter().enumerate() {
            let (x0, x1) = (self.px(edges[i]), self.px(edges[i + 1]));
            let (y0, y1) = (self.py(0.0_f64.max(self.y.0)), self.py(h));
            let _ = write!(
                self.body,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" stroke="white" stroke-width="0.5"/>"#,
                x0,
                y1.min(y0),
                (x1 - x0).max(0.0),
                (y0 - y1).abs()
            );
        }
    }

    pub fn cross(&mut self, at: (f64, f64), color: &str) {
        let (x, y) = (self.px(at.0), self.py(at.1));
        let _ = write!(
            self.body,
            r#"<path d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="{color}" stroke-width="2"/>"#,
            x - 6.0,
            y - 6.0,
            x + 6.0,
            y + 6.0,
            x - 6.0,
            y + 6.0,
            x + 6.0,
            y - 6.0
        );
    }

    pub fn vline(&mut self, x: f64, color: &str) {
        let _ = write!(
            self.body,
            r#"<line x1="{0:.2}" x2="{0:.2}" y1="{1:.2}" y2="{2:.2}" stroke="{color}" stroke-dasharray="4 3"/>"#,
            self.px(x),
            TOP,
            H - BOTTOM
        );
    }

    pub fn legend(&mut self, label: &str, color: &str) {
        self.legend.push((label.into(), color.into()));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        s.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = write!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(&self.title));
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = write!(s, r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#333"/>"##, x1 - x0, y1 - y0);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (xp, yp) = (self.px(xv), self.py(yv));
            let _ = write!(
                s,
                r##"<line x1="{xp:.2}" x2="{xp:.2}" y1="{y1}" y2="{:.2}" stroke="#333"/><text x="{xp:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                y1 + 4.0,
                y1 + 16.0,
                tick(xv)
            );
            let _ = write!(
                s,
                r##"<line x1="{:.2}" x2="{x0}" y1="{yp:.2}" y2="{yp:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                x0 - 4.0,
                x0 - 6.0,
                yp + 4.0,
                tick(yv)
            );
        }
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, esc(&self.x_label));
        let _ = write!(
            s,
            r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
            (y0 + y1) / 2.0,
            esc(&self.y_label)
        );
        let _ = write!(s, r#"<clipPath id="plot"><rect x="{x0}" y="{y0}" width="{}" height="{}"/></clipPath>"#, x1 - x0, y1 - y0);
        let _ = write!(s, r#"<g clip-path="url(#plot)">{}</g>"#, self.body);
        for (i, (label, color)) in self.legend.iter().enumerate() {
            let y = y0 + 14.0 + 14.0 * i as f64;
            let _ = write!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
                x1 - 120.0,
                y - 9.0,
                x1 - 106.0,
                y,
                esc(label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// White to red for a value in `[0, 1]`.
fn heat(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let c = (255.0 * (1.0 - v)).round() as u8;
    format!("rgb(255,{c},{c})")
}

/// Side-by-side square heatmaps with a shared `[0, 1]` colour scale. Cell
/// `[r][c]` is drawn in row `r` from the top.
pub fn heatmap_panels(title: &str, row_label: &str, col_label: &str, panels: &[(String, Vec<Vec<f64>>)]) -> String {
    let cell = 40.0;
    let n = panels.first().map_or(0, |p| p.1.len()) as f64;
    let panel_w = cell * n + 60.0;
    let width = 30.0 + panel_w * panels.len() as f64;
    let height = 90.0 + cell * n;
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    s.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, esc(title));
    for (k, (name, grid)) in panels.iter().enumerate() {
        let ox = 50.0 + panel_w * k as f64;
        let oy = 50.0;
        let _ = write!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, ox + cell * n / 2.0, oy - 8.0, esc(name));
        for (r, row) in grid.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let (x, y) = (ox + cell * c as f64, oy + cell * r as f64);
                let _ = write!(
                    s,
                    r##"<rect x="{x:.2}" y="{y:.2}" width="{cell}" height="{cell}" fill="{}" stroke="#999"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{:.2}</text>"##,
                    heat(v),
                    x + cell / 2.0,
                    y + cell / 2.0 + 4.0,
                    v
                );
            }
            let _ = write!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{r}</text>"#, ox - 4.0, oy + cell * r as f64 + cell / 2.0 + 4.0);
        }
        for c in 0..grid.first().map_or(0, |r| r.len()) {
            let _ = write!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{c}</text>"#, ox + cell * c as f64 + cell / 2.0, oy + cell * n + 14.0);
        }
    }
    let _ = write!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, width / 2.0, height - 10.0, esc(col_label));
    let _ = write!(
        s,
        r#"<text x="14" y="{0:.2}" text-anchor="middle" transform="rotate(-90 14 {0:.2})">{1}</text>"#,
        50.0 + cell * n / 2.0,
        esc(row_label)
    );
    s.push_str("</svg>\n");
    s
}

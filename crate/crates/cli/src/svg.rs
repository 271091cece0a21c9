//! Minimal static SVG charts.

use std::f64::consts::PI;
use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    /// Draw markers instead of a polyline.
    pub markers: bool,
    pub dashed: bool,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn num(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else if (1e-2..1e4).contains(&x.abs()) {
        format!("{x:.3}")
    } else {
        format!("{x:.2e}")
    }
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-300 + 1e-12 * hi.abs() {
        let pad = if hi == 0.0 { 1.0 } else { 0.1 * hi.abs() };
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
}

/// Line chart with linear axes.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (x0, x1) = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;
    let mut s = String::new();
    header(&mut s, title);
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (gx, gy) = (px(xv), py(yv));
        let _ = writeln!(s, r##"<line x1="{gx:.2}" y1="{TOP}" x2="{gx:.2}" y2="{}" stroke="#ddd"/>"##, TOP + ph);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{gy:.2}" x2="{}" y2="{gy:.2}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{gx:.2}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, num(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, gy + 4.0, num(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 18.0, esc(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(ylabel)
    );
    for (k, se) in series.iter().enumerate() {
        if se.markers {
            for &(x, y) in &se.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{}"/>"#, px(x), py(y), se.color);
            }
        } else {
            let pts: Vec<String> = se.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let dash = if se.dashed { r#" stroke-dasharray="6,4""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
                pts.join(" "),
                se.color
            );
        }
        let ly = TOP + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{:.2}" width="10" height="10" fill="{}"/>"#, LEFT + 10.0, ly - 9.0, se.color);
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.2}">{}</text>"#, LEFT + 26.0, esc(&se.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Region g₋ < |g| < g₊ intersected with |arg(±g)| < δ₀ in the complex g
/// plane. With `g_lower ≥ g_upper` only the cone is drawn. `samples` are
/// marked as dots.
pub fn annulus_cone(title: &str, g_lower: f64, g_upper: f64, delta0: f64, samples: &[(f64, f64)], note: &str) -> String {
    let reach = samples
        .iter()
        .map(|&(x, y)| x.hypot(y))
        .chain([g_upper, g_lower])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-300)
        * 1.15;
    let size = H - TOP - BOTTOM;
    let cx = W / 2.0;
    let cy = TOP + size / 2.0;
    let sc = size / 2.0 / reach;
    let pt = |r: f64, th: f64| (cx + sc * r * th.cos(), cy - sc * r * th.sin());
    let mut s = String::new();
    header(&mut s, title);
    let _ = writeln!(s, r#"<line x1="{}" y1="{cy}" x2="{}" y2="{cy}" stroke="black"/>"#, cx - size / 2.0, cx + size / 2.0);
    let _ = writeln!(s, r#"<line x1="{cx}" y1="{TOP}" x2="{cx}" y2="{}" stroke="black"/>"#, TOP + size);
    let _ = writeln!(s, r#"<text x="{}" y="{}">Re g</text>"#, cx + size / 2.0 + 4.0, cy + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">Im g</text>"#, cx, TOP - 4.0);
    // cone edges
    for th in [delta0, -delta0, PI - delta0, PI + delta0] {
        let (x, y) = pt(reach, th);
        let _ = writeln!(s, r##"<line x1="{cx}" y1="{cy}" x2="{x:.2}" y2="{y:.2}" stroke="#555" stroke-dasharray="4,3"/>"##);
    }
    if g_lower < g_upper {
        for mid in [0.0, PI] {
            let (a, b) = (mid - delta0, mid + delta0);
            let (ox0, oy0) = pt(g_upper, a);
            let (ox1, oy1) = pt(g_upper, b);
            let (ix1, iy1) = pt(g_lower, b);
            let (ix0, iy0) = pt(g_lower, a);
            let (ro, ri) = (sc * g_upper, sc * g_lower);
            let large = if 2.0 * delta0 > PI { 1 } else { 0 };
            let _ = writeln!(
                s,
                r##"<path d="M {ox0:.2} {oy0:.2} A {ro:.2} {ro:.2} 0 {large} 0 {ox1:.2} {oy1:.2} L {ix1:.2} {iy1:.2} A {ri:.2} {ri:.2} 0 {large} 1 {ix0:.2} {iy0:.2} Z" fill="#9cc3e6" stroke="#2b6cb0"/>"##
            );
        }
        for (r, name) in [(g_lower, "g-"), (g_upper, "g+")] {
            let _ = writeln!(
                s,
                r##"<circle cx="{cx}" cy="{cy}" r="{:.2}" fill="none" stroke="#999" stroke-dasharray="2,3"/>"##,
                sc * r
            );
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11">{name} = {}</text>"#, cx + 4.0, cy - sc * r - 3.0, num(r));
        }
    }
    for &(x, y) in samples {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#c53030"/>"##, cx + sc * x, cy - sc * y);
    }
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}">{}</text>"#, H - 18.0, esc(note));
    s.push_str("</svg>\n");
    s
}

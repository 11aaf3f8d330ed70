//! Minimal static scatter plots.

use std::fmt::Write as _;

pub enum SeriesStyle {
    /// One `<circle>` per point.
    Markers { radius: f64 },
    /// A `<polyline>` with a circle at its last point.
    Path,
}

pub struct Series {
    /// Used as the CSS class of every element of the series.
    pub class: String,
    pub color: String,
    pub style: SeriesStyle,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn scatter(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let span = if hi > lo { hi - lo } else { 1.0 };
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<rect class="axes" x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#, W / 2.0, H - 14.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (v, anchor_y) in [(x0, H - PAD + 16.0), (x1, H - PAD + 16.0)] {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{anchor_y}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#, sx(v), crate::io::fmt_sig(v, 4));
    }
    for v in [y0, y1] {
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#, PAD - 4.0, sy(v), crate::io::fmt_sig(v, 4));
    }
    for s in series {
        let class = escape(&s.class);
        let color = escape(&s.color);
        let pts: Vec<&(f64, f64)> = s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        match s.style {
            SeriesStyle::Markers { radius } => {
                for p in pts {
                    let _ = writeln!(out, r#"<circle class="{class}" cx="{:.2}" cy="{:.2}" r="{radius}" fill="{color}"/>"#, sx(p.0), sy(p.1));
                }
            }
            SeriesStyle::Path => {
                let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
                let _ = writeln!(out, r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, coords.join(" "));
                if let Some(p) = pts.last() {
                    let _ = writeln!(out, r#"<circle class="{class}-end" cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, sx(p.0), sy(p.1));
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

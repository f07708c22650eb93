//! Minimal static SVG charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const MARGIN_LEFT: f64 = 150.0;
const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

/// Horizontal bars, one per `(label, value)`, top to bottom.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let row = 22.0;
    let height = MARGIN * 2.0 + row * bars.len() as f64;
    let max = bars.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let span = WIDTH - MARGIN_LEFT - MARGIN - 50.0;
    let mut out = String::new();
    header(&mut out, height, title);
    for (i, (label, value)) in bars.iter().enumerate() {
        let y = MARGIN + i as f64 * row;
        let w = value.abs() / max * span;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6.0,
            y + row * 0.65,
            escape(label)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{MARGIN_LEFT}" y="{}" width="{w:.2}" height="{}" fill="#4878a8"/>"##,
            y + 2.0,
            row - 4.0
        );
        let _ = writeln!(out, r#"<text x="{:.2}" y="{}">{value:.2}</text>"#, MARGIN_LEFT + w + 4.0, y + row * 0.65);
    }
    out.push_str("</svg>\n");
    out
}

/// A polyline through `points` with raw samples drawn as dots.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, line: &[(f64, f64)], dots: &[(f64, f64)]) -> String {
    let height = 400.0;
    let (x0, x1) = bounds(line.iter().chain(dots).map(|p| p.0));
    let (y0, y1) = bounds(line.iter().chain(dots).map(|p| p.1));
    let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_LEFT - MARGIN);
    let py = |y: f64| height - MARGIN - (y - y0) / (y1 - y0) * (height - 2.0 * MARGIN - 20.0);
    let mut out = String::new();
    header(&mut out, height, title);
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN_LEFT}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{MARGIN_LEFT}" y1="{t}" x2="{MARGIN_LEFT}" y2="{b}" stroke="black"/>"#,
        b = height - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN + 20.0
    );
    for (v, anchor_y) in [(y0, height - MARGIN), (y1, MARGIN + 20.0)] {
        let _ = writeln!(out, r#"<text x="{}" y="{anchor_y}" text-anchor="end">{v:.3}</text>"#, MARGIN_LEFT - 6.0);
    }
    for (v, anchor_x) in [(x0, MARGIN_LEFT), (x1, WIDTH - MARGIN)] {
        let _ = writeln!(out, r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{v}</text>"#, height - MARGIN + 16.0);
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (MARGIN_LEFT + WIDTH - MARGIN) / 2.0,
        height - 6.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="20" y="{}" transform="rotate(-90 20 {})" text-anchor="middle">{}</text>"#,
        height / 2.0,
        height / 2.0,
        escape(y_label)
    );
    for (x, y) in dots {
        let _ = writeln!(out, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#a0a0a0"/>"##, px(*x), py(*y));
    }
    let pts: Vec<String> = line.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#c04030" stroke-width="2"/>"##,
        pts.join(" ")
    );
    out.push_str("</svg>\n");
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

//! Minimal log-log SVG line charts.

use std::fmt::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Dashed,
    Points,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

impl Series {
    pub fn new(name: &str, xs: &[f64], ys: &[f64], style: Style) -> Self {
        Self { name: name.to_string(), points: xs.iter().copied().zip(ys.iter().copied()).collect(), style }
    }

    /// `c t^{-slope}` over `[t0, t1]`, anchored to pass through `(t0, y0)`.
    pub fn reference_slope(name: &str, t0: f64, t1: f64, y0: f64, slope: f64) -> Self {
        let pts = (0..=20)
            .map(|i| {
                let t = t0 * (t1 / t0).powf(i as f64 / 20.0);
                (t, y0 * (t / t0).powf(-slope))
            })
            .collect();
        Self { name: name.to_string(), points: pts, style: Style::Dashed }
    }
}

const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

/// Render series on log-log axes. Non-positive points are skipped.
pub fn loglog_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 170.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x.log10());
        x1 = x1.max(x.log10());
        y0 = y0.min(y.log10());
        y1 = y1.max(y.log10());
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let px = |x: f64| ml + (x.log10() - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y.log10() - y0) / (y1 - y0) * (h - mt - mb);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (w - mr + ml) / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - ml - mr,
        h - mt - mb
    );
    for d in x0 as i32..=x1 as i32 {
        let x = px(10f64.powi(d));
        let _ = writeln!(out, r##"<line x1="{x:.1}" y1="{mt}" x2="{x:.1}" y2="{}" stroke="#ddd"/>"##, h - mb);
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{d}</text>"#, h - mb + 16.0);
    }
    for d in y0 as i32..=y1 as i32 {
        let y = py(10f64.powi(d));
        let _ = writeln!(out, r##"<line x1="{ml}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, w - mr);
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">1e{d}</text>"#, ml - 6.0, y + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (w - mr + ml) / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (h - mb + mt) / 2.0,
        (h - mb + mt) / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let c = COLOURS[i % COLOURS.len()];
        let good: Vec<(f64, f64)> = s.points.iter().copied().filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite()).collect();
        match s.style {
            Style::Points => {
                for (x, y) in &good {
                    let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}"/>"#, px(*x), py(*y));
                }
            }
            Style::Line | Style::Dashed => {
                let path: Vec<String> = good.iter().map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y))).collect();
                let dash = if s.style == Style::Dashed { r#" stroke-dasharray="6,4""# } else { "" };
                let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"{dash}/>"#, path.join(" "));
            }
        }
        let ly = mt + 14.0 + 18.0 * i as f64;
        let lx = w - mr + 12.0;
        let _ = writeln!(out, r#"<rect x="{lx}" y="{}" width="12" height="4" fill="{c}"/>"#, ly - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 18.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

//! Small output helpers: a path-drawing SVG writer and deterministic JSON.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const PAD: f64 = 56.0;

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

/// Single polyline with axes, tick labels at the ends and an optional
/// dashed reference line at height `reference`.
pub fn line_plot_svg(x_label: &str, y_label: &str, points: &[(f64, f64)], reference: Option<f64>) -> Vec<u8> {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if !finite.is_empty() {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &finite {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if let Some(r) = reference {
            y0 = y0.min(r);
            y1 = y1.max(r);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * PAD);
        let sy = |y: f64| HEIGHT - PAD - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * PAD);
        let _ = writeln!(
            svg,
            r#"<path d="M{a},{b} L{a},{c} L{d},{c}" stroke="black" fill="none"/>"#,
            a = fmt(PAD),
            b = fmt(PAD),
            c = fmt(HEIGHT - PAD),
            d = fmt(WIDTH - PAD)
        );
        let mut d = String::new();
        for (i, &(x, y)) in finite.iter().enumerate() {
            let _ = write!(d, "{}{},{} ", if i == 0 { "M" } else { "L" }, fmt(sx(x)), fmt(sy(y)));
        }
        let _ = writeln!(svg, r#"<path d="{}" stroke="steelblue" stroke-width="1.5" fill="none"/>"#, d.trim_end());
        if let Some(r) = reference {
            let _ = writeln!(
                svg,
                r#"<path d="M{},{y} L{},{y}" stroke="firebrick" stroke-dasharray="6,4" fill="none"/>"#,
                fmt(PAD),
                fmt(WIDTH - PAD),
                y = fmt(sy(r))
            );
        }
        let label = |svg: &mut String, x: f64, y: f64, anchor: &str, text: &str| {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="12" font-family="sans-serif" text-anchor="{anchor}">{text}</text>"#,
                fmt(x),
                fmt(y)
            );
        };
        label(&mut svg, PAD, HEIGHT - PAD + 16.0, "middle", &format!("{x0:.4}"));
        label(&mut svg, WIDTH - PAD, HEIGHT - PAD + 16.0, "middle", &format!("{x1:.4}"));
        label(&mut svg, PAD - 6.0, HEIGHT - PAD, "end", &format!("{y0:.4}"));
        label(&mut svg, PAD - 6.0, PAD + 4.0, "end", &format!("{y1:.4}"));
        label(&mut svg, WIDTH / 2.0, HEIGHT - 12.0, "middle", x_label);
        label(&mut svg, 14.0, HEIGHT / 2.0, "middle", y_label);
    }
    svg.push_str("</svg>\n");
    svg.into_bytes()
}

/// Pretty JSON with a trailing newline; key order follows the value, so
/// identical values give identical bytes.
pub fn json_bytes(value: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).unwrap_or_else(|_| "null".into());
    s.push('\n');
    s.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 0.1, (i as f64).sin())).collect();
        let a = line_plot_svg("x", "y", &pts, Some(0.5));
        assert_eq!(a, line_plot_svg("x", "y", &pts, Some(0.5)));
        let s = String::from_utf8(a).unwrap();
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<path").count(), 3);
        let empty = String::from_utf8(line_plot_svg("x", "y", &[], None)).unwrap();
        assert!(empty.contains("</svg>"));
    }
}

use std::fmt::Write as _;

const W: f64 = 360.0;
const H: f64 = 300.0;
const PAD: f64 = 40.0;

/// Precision-recall curve as a standalone SVG document.
pub fn pr_curve_svg(title: &str, points: &[(f64, f64)], ap: f64) -> String {
    let sx = |r: f64| PAD + r * (W - 2.0 * PAD);
    let sy = |p: f64| H - PAD - p * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#,
        x0 = sx(0.0),
        x1 = sx(1.0),
        y0 = sy(0.0),
        y1 = sy(1.0)
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#, sx(t), sy(0.0) + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#, sx(0.0) - 4.0, sy(t) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#, W / 2.0, H - 6.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">precision</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">{} (AP {:.4})</text>"#,
        W / 2.0,
        escape(title),
        ap
    );
    let mut d = String::new();
    let mut prev = (0.0, points.first().map(|p| p.1).unwrap_or(1.0));
    let _ = write!(d, "M{:.2},{:.2}", sx(prev.0), sy(prev.1));
    for &(r, p) in points {
        // step curve: recall moves right at the previous precision, then drops
        let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", sx(r), sy(prev.1), sx(r), sy(p));
        prev = (r, p);
    }
    let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#);
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_enough() {
        let svg = pr_curve_svg("class <3>", &[(0.5, 1.0), (0.5, 0.5), (1.0, 0.667)], 0.83);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("class &lt;3&gt;"));
        assert!(svg.contains("AP 0.8300"));
    }
}

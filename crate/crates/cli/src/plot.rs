//! Minimal static SVG charts.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 40.0;

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    let (x0, y0, x1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{}" stroke="black"/>"#, MARGIN);
    s
}

fn plot_w() -> f64 {
    W - 1.5 * MARGIN
}

fn plot_h() -> f64 {
    H - 2.0 * MARGIN
}

/// Bar chart of `(bin_start, bin_end, count)` rows.
pub fn histogram_svg(rows: &[(f64, f64, usize)]) -> String {
    let mut s = open("Prediction-to-truth distance (px)");
    let max = rows.iter().map(|r| r.2).max().unwrap_or(0).max(1) as f64;
    let bw = plot_w() / rows.len().max(1) as f64;
    for (i, (lo, _, n)) in rows.iter().enumerate() {
        let h = plot_h() * *n as f64 / max;
        let x = MARGIN + i as f64 * bw;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab5"><title>{n}</title></rect>"##,
            x + 1.0,
            H - MARGIN - h,
            (bw - 2.0).max(1.0),
            h
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{lo}</text>"#, x, H - MARGIN + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 4.0, MARGIN + 4.0, max as usize);
    s.push_str("</svg>\n");
    s
}

/// Polyline of `(recall, precision)` points on the unit square.
pub fn pr_svg(points: &[(f64, f64)], title: &str) -> String {
    let mut s = open(title);
    let path: Vec<String> = points
        .iter()
        .map(|&(r, p)| format!("{:.2},{:.2}", MARGIN + r * plot_w(), H - MARGIN - p * plot_h()))
        .collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="1.5"/>"##, path.join(" "));
    for (v, label) in [(0.0, "0"), (1.0, "1")] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{label}</text>"#, MARGIN + v * plot_w(), H - MARGIN + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#, MARGIN - 4.0, H - MARGIN - v * plot_h() + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#, W / 2.0, H - 8.0);
    s.push_str("</svg>\n");
    s
}

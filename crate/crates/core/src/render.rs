//! Per-frame trajectory plots of selected feature dimensions as SVG.

use std::fmt::Write;

use crate::data::MotionSequence;
use crate::error::{Error, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;

/// One line per dimension in `dims`, frames on the x axis. An optional
/// second motion (for example the ground truth) is drawn dashed.
pub fn render_svg(
    motion: &MotionSequence,
    reference: Option<&MotionSequence>,
    dims: &[usize],
    title: &str,
) -> Result<String> {
    if dims.is_empty() {
        return Err(Error::domain("no dimensions selected"));
    }
    for m in std::iter::once(motion).chain(reference) {
        if let Some(&d) = dims.iter().find(|&&d| d >= m.dim()) {
            return Err(Error::domain(format!(
                "dimension {d} is outside a {}-wide motion",
                m.dim()
            )));
        }
    }
    let seqs: Vec<&MotionSequence> = std::iter::once(motion).chain(reference).collect();
    let frames = seqs.iter().map(|m| m.len()).max().unwrap_or(1).max(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in &seqs {
        for &d in dims {
            for &v in m.frames().column(d) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::domain("motion values are not finite"));
    }
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let x = |t: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * t as f64 / (frames - 1) as f64;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="gray"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="14">{}</text>"#,
        MARGIN - 12.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{}" font-family="sans-serif" font-size="10">{hi:.3}</text><text x="4" y="{}" font-family="sans-serif" font-size="10">{lo:.3}</text>"#,
        MARGIN + 4.0,
        HEIGHT - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10">frame {}</text>"#,
        WIDTH - MARGIN - 50.0,
        HEIGHT - MARGIN + 16.0,
        frames - 1
    );
    for (k, &d) in dims.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (which, m) in seqs.iter().enumerate() {
            let points: Vec<String> = m
                .frames()
                .column(d)
                .iter()
                .enumerate()
                .map(|(t, &v)| format!("{:.2},{:.2}", x(t), y(v)))
                .collect();
            let dash = if which == 1 { r#" stroke-dasharray="4 3""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                points.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">dim {d}</text>"#,
            WIDTH - MARGIN + 4.0,
            MARGIN + 12.0 * (k as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

//! PC1/PC2 scatter plot written as plain SVG.

use std::fmt::Write;

use crate::triage::{Label, TriageReport};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 50.0;

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// `pc1`/`pc2` are per-row coordinates aligned with `report.rows`.
pub fn scatter_svg(report: &TriageReport, pc1: &[f64], pc2: &[f64]) -> String {
    let (x0, x1) = span(pc1.iter().copied());
    let (y0, y1) = span(pc2.iter().copied());
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        r#"<g stroke="black" stroke-width="1"><line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}"/></g>"#
    );
    let _ = writeln!(
        out,
        r#"<g font-family="sans-serif" font-size="12"><text x="{:.1}" y="{:.1}" text-anchor="middle">PC1</text><text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">PC2</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{left}" y="{:.1}">{x0:.3}</text><text x="{right}" y="{:.1}" text-anchor="end">{x1:.3}</text><text x="{:.1}" y="{bottom}" text-anchor="end">{y0:.3}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{y1:.3}</text>"#,
        bottom + 16.0,
        bottom + 16.0,
        left - 4.0,
        left - 4.0,
        top + 4.0
    );
    let kept = report.kept().count();
    let _ = writeln!(
        out,
        r##"<text x="{right}" y="20" text-anchor="end"><tspan fill="#1f77b4">KEEP {kept}</tspan> <tspan fill="#d62728">DISCARD {}</tspan></text></g>"##,
        report.rows.len() - kept
    );

    for (i, row) in report.rows.iter().enumerate() {
        let (cx, cy) = (sx(pc1[i]), sy(pc2[i]));
        let id = escape(&row.id);
        match row.label {
            Label::Keep => {
                let _ = writeln!(
                    out,
                    r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="#1f77b4" fill-opacity="0.7"><title>{id}</title></circle>"##
                );
            }
            Label::Discard => {
                let _ = writeln!(
                    out,
                    r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="5" fill="none" stroke="#d62728" stroke-width="2"><title>{id} (discard)</title></circle>"##
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triage::TriageRow;

    #[test]
    fn marks_discards_differently() {
        let row = |id: &str, label| TriageRow {
            id: id.into(),
            scores: vec![0.0],
            distance: 0.0,
            label,
            source_bytes: 1,
        };
        let report = TriageReport {
            rows: vec![
                row("a", Label::Keep),
                row("b<", Label::Discard),
                row("c", Label::Keep),
            ],
            threshold: 3.5,
            k: 1,
            kept_bytes: 2,
            discarded_bytes: 1,
            kept_fraction: 2.0 / 3.0,
        };
        let svg = scatter_svg(&report, &[0.0, 5.0, 1.0], &[0.0, 0.0, 0.0]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches("stroke=\"#d62728\"").count(), 1);
        assert!(svg.contains("b&lt; (discard)"));
    }
}

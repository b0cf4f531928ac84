//! Static SVG rendering of the per-class distance distributions, one panel
//! per label with flagged pairs drawn as dots.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::curation::RelationshipLabel;
use crate::report::ReportDocument;

const PANEL_W: f64 = 140.0;
const PLOT_H: f64 = 360.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;
const BINS: usize = 40;

fn color(label: RelationshipLabel) -> &'static str {
    match label {
        RelationshipLabel::SM => "#e377c2",
        RelationshipLabel::MZ => "#9467bd",
        RelationshipLabel::DZ => "#2ca02c",
        RelationshipLabel::FS => "#ff7f0e",
        RelationshipLabel::UR => "#1f77b4",
    }
}

/// Panels (label, sorted finite distances) in ascending order of median.
pub fn panel_order(report: &ReportDocument) -> Vec<(RelationshipLabel, Vec<f64>)> {
    let mut by_label: BTreeMap<RelationshipLabel, Vec<f64>> = BTreeMap::new();
    for p in &report.pairs {
        by_label.entry(p.label).or_default().push(p.distance);
    }
    let mut panels: Vec<(RelationshipLabel, Vec<f64>, f64)> = by_label
        .into_iter()
        .map(|(l, mut d)| {
            d.sort_by(f64::total_cmp);
            let median = report
                .stats_for(l)
                .and_then(|s| s.median)
                .unwrap_or(d[d.len() / 2]);
            (l, d, median)
        })
        .collect();
    panels.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    panels.into_iter().map(|(l, d, _)| (l, d)).collect()
}

pub fn render_svg(report: &ReportDocument) -> String {
    let panels = panel_order(report);
    let d_max = panels
        .iter()
        .filter_map(|(_, d)| d.last().copied())
        .chain(report.flags.iter().map(|f| f.distance))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.05;
    let width = MARGIN_L + PANEL_W * panels.len().max(1) as f64 + 20.0;
    let height = MARGIN_T + PLOT_H + MARGIN_B;
    let y = |d: f64| MARGIN_T + PLOT_H * (1.0 - d / d_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle">pairwise distance d = -ln J by relationship (report v{})</text>"#,
        width / 2.0,
        report.version
    );
    // y axis with ticks
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{:.1}" stroke="black"/>"#,
        MARGIN_T + PLOT_H
    );
    for i in 0..=5 {
        let d = d_max * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{d:.2}</text>"#,
            MARGIN_L - 6.0,
            y(d) + 4.0
        );
    }

    for (i, (label, dists)) in panels.iter().enumerate() {
        let x0 = MARGIN_L + PANEL_W * i as f64;
        let cx = x0 + PANEL_W / 2.0;
        let median = report.stats_for(*label).and_then(|st| st.median);
        let _ = writeln!(
            s,
            r#"<g class="panel" data-label="{label}" data-n="{}"{}>"#,
            dists.len(),
            median.map(|m| format!(r#" data-median="{m}""#)).unwrap_or_default()
        );
        let mut counts = [0usize; BINS];
        for &d in dists {
            counts[((d / d_max * BINS as f64) as usize).min(BINS - 1)] += 1;
        }
        let peak = *counts.iter().max().unwrap_or(&1) as f64;
        let bin_h = PLOT_H / BINS as f64;
        for (b, &c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
            let half = (PANEL_W / 2.0 - 12.0) * c as f64 / peak;
            let top = MARGIN_T + PLOT_H - (b + 1) as f64 * bin_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{bin_h:.1}" fill="{}" fill-opacity="0.55"/>"#,
                cx - half,
                2.0 * half,
                color(*label)
            );
        }
        if let Some(m) = median {
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
                cx - 30.0,
                cx + 30.0,
                y(m),
                y(m)
            );
        }
        for f in report.flags.iter().filter(|f| f.label == *label) {
            let _ = writeln!(
                s,
                r#"<circle class="flag" cx="{cx:.1}" cy="{:.1}" r="4" fill="{}" stroke="black" data-a="{}" data-b="{}"/>"#,
                y(f.distance),
                color(*label),
                f.pair.a,
                f.pair.b
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{label} (n={})</text>"#,
            MARGIN_T + PLOT_H + 18.0,
            dists.len()
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

//! Minimal SVG emission for loss curves and metric bars.

use std::path::Path;

use crate::error::Result;
use crate::losses::LossReport;

const W: f64 = 720.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn header() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    )
}

/// Total-loss curve (log of the step stream) as an SVG polyline.
pub fn loss_curve_svg(reports: &[LossReport]) -> String {
    let mut svg = header();
    if reports.len() >= 2 {
        let max_step = reports.last().unwrap().step.max(1) as f64;
        let (lo, hi) = reports.iter().fold((f64::MAX, f64::MIN), |(lo, hi), r| {
            (lo.min(r.total), hi.max(r.total))
        });
        let span = (hi - lo).max(1e-9);
        let pts: Vec<String> = reports
            .iter()
            .map(|r| {
                let x = MARGIN + (W - 2.0 * MARGIN) * r.step as f64 / max_step;
                let y = H - MARGIN - (H - 2.0 * MARGIN) * (r.total - lo) / span;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{MARGIN}\" y=\"20\">total loss: min {lo:.4} max {hi:.4}, {} steps</text>\n",
            reports.len()
        ));
    } else {
        svg.push_str("<text x=\"20\" y=\"20\">not enough points</text>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Labelled metric bars in [0,1].
pub fn metric_bars_svg(rows: &[(String, f64)]) -> String {
    let mut svg = header();
    if !rows.is_empty() {
        let bw = (W - 2.0 * MARGIN) / rows.len() as f64;
        for (i, (label, value)) in rows.iter().enumerate() {
            let v = value.clamp(0.0, 1.0);
            let x = MARGIN + i as f64 * bw;
            let bh = (H - 2.0 * MARGIN) * v;
            let y = H - MARGIN - bh;
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"#2ca02c\"/>\n",
                x + bw * 0.1,
                bw * 0.8
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>\n",
                x + bw * 0.5,
                H - MARGIN + 15.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{value:.4}</text>\n",
                x + bw * 0.5,
                y - 5.0
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

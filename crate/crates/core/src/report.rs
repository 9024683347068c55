//! CSV and SVG exports: training metrics, sweep tables, PR curves, and
//! sampling-center dumps.

use std::io::{self, Write};
use std::path::Path;

use crate::sampling::SamplingCenter;
use crate::temporal::SweepRow;
use crate::training::MetricsRow;

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> io::Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                format!("{:.6}", r.total),
                format!("{:.6}", r.loc_first),
                format!("{:.6}", r.loc_second),
                format!("{:.6}", r.conf),
                format!("{}", r.lr),
            ]
        })
        .collect();
    write_csv(
        path,
        &["step", "L_total", "L_loc_ARM", "L_loc_ODM", "L_conf", "lr"],
        &body,
    )
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> io::Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                format!("{}", r.e),
                format!("{:.6}", r.map),
                r.rg_calls.to_string(),
                r.rd_calls.to_string(),
                format!("{:.3}", r.ms_per_frame),
            ]
        })
        .collect();
    write_csv(path, &["k", "e", "mAP", "rg_calls", "rd_calls", "ms_per_frame"], &body)
}

pub fn write_pr_csv(path: &Path, points: &[(f64, f64)]) -> io::Result<()> {
    let body: Vec<Vec<String>> = points
        .iter()
        .map(|(r, p)| vec![format!("{:.6}", r), format!("{:.6}", p)])
        .collect();
    write_csv(path, &["recall", "precision"], &body)
}

pub fn write_sampling_centers_csv(
    path: &Path,
    entries: &[(usize, usize, Vec<SamplingCenter>)],
) -> io::Result<()> {
    let mut body = Vec::new();
    for (scale, head_path, rows) in entries {
        for r in rows {
            body.push(vec![
                scale.to_string(),
                head_path.to_string(),
                r.cell_row.to_string(),
                r.cell_col.to_string(),
                format!("{:.4}", r.base_x),
                format!("{:.4}", r.base_y),
                format!("{:.4}", r.refined_x),
                format!("{:.4}", r.refined_y),
            ]);
        }
    }
    write_csv(
        path,
        &["scale", "path", "cell_row", "cell_col", "base_x", "base_y", "refined_x", "refined_y"],
        &body,
    )
}

/// One labeled polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal line plot: axes with end labels, one polyline per series,
/// legend in the top-right corner.
pub fn svg_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> io::Result<()> {
    let (width, height) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (mut y0, mut y1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if !x0.is_finite() || x0 == x1 {
        x0 -= 0.5;
        x1 = x0 + 1.0;
    }
    if !y0.is_finite() || y0 == y1 {
        y0 -= 0.5;
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        width, height
    ));
    svg.push_str(&format!(
        "<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n",
        width, height
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        width / 2.0,
        title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        ml, mt + ph, ml + pw, mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        ml, mt, ml, mt + ph
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        ml + pw / 2.0,
        height - 12.0,
        x_label
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0,
        y_label
    ));
    for (v, x) in [(x0, ml), (x1, ml + pw)] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n",
            x,
            mt + ph + 18.0,
            v
        ));
    }
    for (v, y) in [(y0, mt + ph), (y1, mt)] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
            ml - 6.0,
            y + 4.0,
            v
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            color,
            pts.join(" ")
        ));
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\"/>\n",
                sx(x),
                sy(y),
                color
            ));
        }
        let ly = mt + 16.0 * i as f64 + 8.0;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            ml + pw - 130.0,
            ly - 9.0,
            color
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            ml + pw - 115.0,
            ly,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}

//! CSV exports of learned graphs and attention weights, and SVG line plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};

use crate::error::{HagcnError, Result};
use crate::graph::{materialize_dynamic_slot, materialize_static, write_adjacency_csvs, AdjacencyTensor};
use crate::model::{attention_weights, ModelConfig, ModelParams};

fn broadcast(adj: AdjacencyTensor, channels: usize) -> AdjacencyTensor {
    if adj.num_channels() == channels {
        return adj;
    }
    let single = adj.weights.index_axis(Axis(0), 0);
    let n = single.nrows();
    let mut weights = Array3::zeros((channels, n, n));
    for mut w in weights.outer_iter_mut() {
        w.assign(&single);
    }
    AdjacencyTensor {
        weights,
        provenance: adj.provenance,
    }
}

/// Writes `adj_static_f{f}.csv` and, per requested slot,
/// `adj_dyn_s{slot}_f{f}.csv`, one file per hidden channel. Disabled modules
/// write nothing.
pub fn export_adjacency(
    params: &ModelParams,
    config: &ModelConfig,
    node_ids: &[String],
    slots: &[usize],
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| HagcnError::io(dir, e))?;
    let f = config.hidden_channels;
    let mut written = Vec::new();
    if let Some(sf) = &params.static_factors {
        written.extend(write_adjacency_csvs(&broadcast(materialize_static(sf), f), node_ids, dir, "adj_static")?);
    }
    if let Some(df) = &params.dynamic_factors {
        for &slot in slots {
            let adj = broadcast(materialize_dynamic_slot(df, slot)?, f);
            written.extend(write_adjacency_csvs(&adj, node_ids, dir, &format!("adj_dyn_s{slot}"))?);
        }
    }
    Ok(written)
}

/// Writes channel attention weights as a wide CSV: one row per block, module
/// and diffusion step, one column per hidden channel.
pub fn export_attention(
    params: &ModelParams,
    config: &ModelConfig,
    slot: usize,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let records = attention_weights(params, config, slot)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["block".to_string(), "module".to_string(), "step".to_string()];
    header.extend((0..config.hidden_channels).map(|c| format!("c{c}")));
    w.write_record(&header)?;
    for r in &records {
        let mut row = vec![r.block.to_string(), r.module.to_string(), r.step.to_string()];
        row.extend(r.weights.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HagcnError::io(path, e))?;
    Ok(records.len())
}

/// One polyline of a plot.
#[derive(Debug, Clone)]
pub struct Line {
    pub label: String,
    pub color: String,
    pub values: Vec<f64>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG line chart; non-finite values break the line.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, lines: &[Line]) -> String {
    let finite = lines.iter().flat_map(|l| l.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let len = lines.iter().map(|l| l.values.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (len - 1) as f64;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0, y(v) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (k, line) in lines.iter().enumerate() {
        let mut d = String::new();
        let mut pen_down = false;
        for (i, &v) in line.values.iter().enumerate() {
            if !v.is_finite() {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.2} {:.2} ", if pen_down { "L" } else { "M" }, x(i), y(v));
            pen_down = true;
        }
        let _ = writeln!(svg, r#"<path d="{}" stroke="{}" fill="none" stroke-width="1.5"/>"#, d.trim_end(), line.color);
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/>"#, x1 - 120.0, x1 - 100.0, line.color);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, x1 - 95.0, ly + 4.0, escape(&line.label));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(svg: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, svg).map_err(|e| HagcnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_path_per_line_and_breaks_on_nan() {
        let lines = vec![
            Line { label: "truth".into(), color: "black".into(), values: vec![1.0, 2.0, f64::NAN, 3.0] },
            Line { label: "pred <1>".into(), color: "red".into(), values: vec![1.5, 2.5, 2.0, 2.9] },
        ];
        let svg = line_plot_svg("node s0", "step", "value", &lines);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<path d=\"M").count(), 3);
        assert!(svg.contains("pred &lt;1&gt;"));
        let first = svg.lines().find(|l| l.contains("stroke=\"black\" fill=\"none\" stroke-width")).unwrap();
        assert_eq!(first.matches('M').count(), 2);
    }

    #[test]
    fn constant_and_empty_series_still_render() {
        let flat = line_plot_svg("t", "x", "y", &[Line { label: "c".into(), color: "blue".into(), values: vec![2.0; 5] }]);
        assert!(!flat.contains("NaN"));
        let empty = line_plot_svg("t", "x", "y", &[]);
        assert!(empty.contains("</svg>"));
    }
}

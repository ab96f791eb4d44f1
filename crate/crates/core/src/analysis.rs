//! FLOPs accounting, sparsity reports and plot emitters.
//!
//! FLOPs are counted as multiply-accumulates (no factor of two): a conv
//! layer contributes `out_ch * in_ch * k^2 * out_h * out_w`, a linear layer
//! `out * in_features`. Batch norm, activations and pooling are excluded.
//! Under a mask set, channel counts shrink to the kept counts on both the
//! output side and (through the producer's mask) the input side.

use crate::netgraph::{LayerKind, MaskSet, ModelGraph, Op};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Per-layer multiply-accumulate counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFlops {
    pub id: String,
    pub kind: String,
    pub macs_dense: u64,
    pub macs_masked: u64,
}

/// FLOPs breakdown for a graph, optionally under a mask set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsReport {
    pub arch: String,
    pub input_hw: (usize, usize),
    pub layers: Vec<LayerFlops>,
    pub total_dense: u64,
    pub total_masked: u64,
}

impl FlopsReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("layer,kind,macs_dense,macs_masked\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{},{}", l.id, l.kind, l.macs_dense, l.macs_masked);
        }
        let _ = writeln!(out, "total,,{},{}", self.total_dense, self.total_masked);
        out
    }
}

/// Count multiply-accumulates per layer. With `masks`, the masked column
/// reflects kept output channels and the kept channels of each layer's
/// producer group; without, it equals the dense column.
pub fn count_flops(graph: &ModelGraph, masks: Option<&MaskSet>) -> Result<FlopsReport> {
    if let Some(m) = masks {
        m.validate(graph)?;
    }
    let shapes = graph.shapes()?;
    let mut layers = Vec::new();
    let mut total_dense = 0u64;
    let mut total_masked = 0u64;

    for (i, node) in graph.nodes().iter().enumerate() {
        let layer = match graph.layer(&node.id) {
            Some(l) => l,
            None => continue,
        };
        let (dense, masked) = match &node.op {
            Op::Conv(c) => {
                let (oh, ow) = (shapes[i].1, shapes[i].2);
                let k = match layer.kind {
                    LayerKind::Conv { k, .. } => k,
                    LayerKind::Linear => unreachable!(),
                };
                let per_pair = (k * k * oh * ow) as u64;
                let dense = (layer.out_channels * layer.in_channels) as u64 * per_pair;
                let masked = match masks {
                    Some(m) => {
                        let kept_out = m
                            .get(&node.id)
                            .map_or(layer.out_channels, |mk| mk.kept());
                        let kept_in = graph.kept_in_channels(layer, m);
                        (kept_out * kept_in) as u64 * per_pair
                    }
                    None => dense,
                };
                let _ = c;
                (dense, masked)
            }
            Op::Linear(l) => {
                let dense = (l.w.nrows() * l.w.ncols()) as u64;
                let masked = match masks {
                    Some(m) => {
                        let kept_out = m.get(&node.id).map_or(l.w.nrows(), |mk| mk.kept());
                        let kept_in = graph.kept_in_channels(layer, m) * l.spatial;
                        (kept_out * kept_in) as u64
                    }
                    None => dense,
                };
                (dense, masked)
            }
            _ => unreachable!("layer view points at a non-layer node"),
        };
        total_dense += dense;
        total_masked += masked;
        layers.push(LayerFlops {
            id: node.id.clone(),
            kind: node.op.kind_str().to_string(),
            macs_dense: dense,
            macs_masked: masked,
        });
    }

    Ok(FlopsReport {
        arch: graph.name.clone(),
        input_hw: (graph.input_shape.1, graph.input_shape.2),
        layers,
        total_dense,
        total_masked,
    })
}

/// Relative FLOPs reduction of `ours` against `baseline`, as a positive
/// fraction: `(baseline - ours) / baseline`. 900M against a 1400M baseline
/// is a 0.357 reduction.
pub fn speedup(ours: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        return 0.0;
    }
    (baseline as f64 - ours as f64) / baseline as f64
}

/// Per-layer pruned fractions across one or more sparsity levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityRow {
    pub id: String,
    pub channels: usize,
    /// One pruned fraction per mask set, aligned with [`SparsityReport::levels`].
    pub pruned: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityReport {
    pub arch: String,
    /// Target sparsity of each column.
    pub levels: Vec<f32>,
    pub rows: Vec<SparsityRow>,
}

/// Tabulate pruned fractions per layer for each mask set. Layers without a
/// mask (the classifier) report zero.
pub fn sparsity_report(graph: &ModelGraph, masksets: &[&MaskSet]) -> Result<SparsityReport> {
    for m in masksets {
        m.validate(graph)?;
    }
    let mut rows = Vec::new();
    for layer in graph.layers() {
        let pruned = masksets
            .iter()
            .map(|m| m.get(&layer.id).map_or(0.0, |mask| mask.sparsity()))
            .collect();
        rows.push(SparsityRow { id: layer.id.clone(), channels: layer.out_channels, pruned });
    }
    Ok(SparsityReport {
        arch: graph.name.clone(),
        levels: masksets.iter().map(|m| m.target_sparsity).collect(),
        rows,
    })
}

impl SparsityReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("layer,channels");
        for l in &self.levels {
            let _ = write!(out, ",s{l:.2}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.id, row.channels);
            for p in &row.pruned {
                let _ = write!(out, ",{:.4}", p);
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width table with one-decimal percentages.
    pub fn to_text_table(&self) -> String {
        let id_w = self
            .rows
            .iter()
            .map(|r| r.id.len())
            .max()
            .unwrap_or(5)
            .max("layer".len());
        let mut out = format!("{:<id_w$}  {:>8}", "layer", "channels");
        for l in &self.levels {
            let _ = write!(out, "  {:>7}", format!("{:.0}%", l * 100.0));
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<id_w$}  {:>8}", row.id, row.channels);
            for p in &row.pruned {
                let _ = write!(out, "  {:>7}", format!("{:.1}%", p * 100.0));
            }
            out.push('\n');
        }
        out
    }
}

/// One line in an accuracy-vs-FLOPs plot.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    /// (mega-MACs, accuracy %) points; drawn in the given order.
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Render an accuracy-vs-FLOPs chart as a standalone SVG document.
pub fn plot_accuracy_vs_flops(series: &[PlotSeries], title: &str) -> Result<String> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Config("nothing to plot".into()));
    }
    let (w, h) = (640.0f64, 440.0f64);
    let (ml, mr, mt, mb) = (70.0f64, 20.0f64, 40.0f64, 55.0f64);
    let pw = w - ml - mr;
    let ph = h - mt - mb;

    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).abs().max(1e-9);
        *lo -= 0.07 * span;
        *hi += 0.07 * span;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);

    let sx = move |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = move |y: f64| mt + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );

    // Axes and ticks.
    let _ = writeln!(
        svg,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - mb,
        w - mr,
        h - mb
    );
    let _ = writeln!(svg, r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#, h - mb);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let px = sx(fx);
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="black"/>"#,
            h - mb,
            h - mb + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{px:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{fx:.0}</text>"#,
            h - mb + 18.0
        );
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(fy);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{py:.1}" x2="{ml}" y2="{py:.1}" stroke="black"/>"#,
            ml - 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{fy:.1}</text>"#,
            ml - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">FLOPs (M MACs)</text>"#,
        ml + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">accuracy (%)</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    );

    // Series.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if s.points.len() > 1 {
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let ly = mt + 16.0 * si as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{:.1}" width="10" height="10" fill="{color}"/>"#,
            w - mr - 150.0,
            ly
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            w - mr - 135.0,
            ly + 9.0,
            xml_escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

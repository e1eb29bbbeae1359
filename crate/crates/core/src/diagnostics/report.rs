use std::fmt::Write as _;
use std::io::Write;

use super::attention::{AttnDistanceReport, AvgAttentionMap, HeadSimilarityReport, PatternScores};
use super::landscape::LandscapeCurve;
use crate::error::Result;
use crate::tensor::Tensor;

const CELL: usize = 12;
const GAP: usize = 16;
const LABEL: usize = 16;

pub fn write_attention_distance_csv<W: Write>(mut w: W, r: &AttnDistanceReport) -> Result<()> {
    writeln!(w, "layer,head,distance")?;
    for l in 0..r.layers {
        for h in 0..r.heads {
            writeln!(w, "{l},{h},{}", r.get(l, h))?;
        }
    }
    Ok(())
}

pub fn write_head_similarity_csv<W: Write>(mut w: W, r: &HeadSimilarityReport) -> Result<()> {
    writeln!(w, "layer,mean_cosine")?;
    for (l, v) in r.per_layer.iter().enumerate() {
        writeln!(w, "{l},{v}")?;
    }
    Ok(())
}

pub fn write_landscape_csv<W: Write>(mut w: W, curves: &[LandscapeCurve]) -> Result<()> {
    writeln!(w, "direction,alpha,loss,top1")?;
    for c in curves {
        for s in &c.samples {
            writeln!(w, "{},{},{},{}", c.direction, s.alpha, s.loss, s.top1)?;
        }
    }
    Ok(())
}

/// Stripped patch maps in long form: `layer,query,key,value`.
pub fn write_attention_maps_csv<W: Write>(mut w: W, maps: &[AvgAttentionMap]) -> Result<()> {
    writeln!(w, "layer,query,key,value")?;
    for m in maps {
        let n = m.map.shape()[0];
        for (i, v) in m.map.data().iter().enumerate() {
            writeln!(w, "{},{},{},{v}", m.layer, i / n, i % n)?;
        }
    }
    Ok(())
}

pub fn write_pattern_scores_csv<W: Write>(mut w: W, scores: &[PatternScores]) -> Result<()> {
    writeln!(w, "layer,diagonality,column_concentration")?;
    for (l, s) in scores.iter().enumerate() {
        writeln!(w, "{l},{},{}", s.diagonality, s.column_concentration)?;
    }
    Ok(())
}

fn gray_levels(map: &Tensor) -> Vec<u8> {
    let max = map.data().iter().copied().fold(0.0, f64::max);
    map.data()
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

/// Plain-text PGM of a square map, scaled so the largest entry is white.
pub fn write_pgm<W: Write>(mut w: W, map: &Tensor) -> Result<()> {
    let s = map.shape();
    let (rows, cols) = (s[0], s.get(1).copied().unwrap_or(1));
    writeln!(w, "P2\n{cols} {rows}\n255")?;
    for row in gray_levels(map).chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Heat-map grid of per-layer maps, laid out left to right and top to
/// bottom with `columns` panels per row.
pub fn attention_svg(maps: &[AvgAttentionMap], columns: usize) -> String {
    let columns = columns.max(1);
    let n = maps.first().map_or(0, |m| m.map.shape()[0]);
    let panel = n * CELL;
    let rows = maps.len().div_ceil(columns);
    let width = columns * (panel + GAP) + GAP;
    let height = rows * (panel + GAP + LABEL) + GAP;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (i, m) in maps.iter().enumerate() {
        let x0 = GAP + (i % columns) * (panel + GAP);
        let y0 = GAP + (i / columns) * (panel + GAP + LABEL);
        let _ = writeln!(
            svg,
            r#"<text x="{x0}" y="{}" font-family="sans-serif" font-size="12">Layer {}</text>"#,
            y0 + LABEL - 4,
            m.layer
        );
        for (j, level) in gray_levels(&m.map).into_iter().enumerate() {
            let (r, c) = (j / n, j % n);
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({level},{level},{level})"/>"#,
                x0 + c * CELL,
                y0 + LABEL + r * CELL
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

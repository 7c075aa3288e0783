//! Attention overlays on a slide pyramid level.

use crate::colormap::viridis;
use frostmil_core::mil::{min_max, AttentionGrid};
use frostmil_core::preprocess::PatchRecord;
use frostmil_core::synthwsi::Slide;
use frostmil_core::{Error, Result};
use image::RgbImage;
use std::collections::BTreeMap;

/// Blends `viridis(weight)` over every grid cell of `slide` at `level`.
///
/// Weights are min-max normalised again so any grid renders on the full
/// colormap; a constant grid renders at mid-colormap. Every cell must be
/// the origin of one of the slide's patch records.
pub fn render_heatmap(
    slide: &Slide,
    level: usize,
    grid: &AttentionGrid,
    records: &[PatchRecord],
    alpha: f64,
) -> Result<RgbImage> {
    let m = &slide.manifest;
    if grid.slide_id != m.slide_id {
        return Err(Error::validation(
            "attention grid",
            format!("grid for slide {} rendered on slide {}", grid.slide_id, m.slide_id),
        ));
    }
    let mut img = slide.level(level)?.clone();
    let ds = m.levels[level];
    let by_origin: BTreeMap<(u32, u32), &PatchRecord> = records
        .iter()
        .filter(|r| r.slide_id == m.slide_id)
        .map(|r| ((r.x, r.y), r))
        .collect();
    let weights = min_max(&grid.cells.iter().map(|c| c.weight).collect::<Vec<_>>());
    let a = alpha as f32;
    for (cell, w) in grid.cells.iter().zip(weights) {
        let r = by_origin.get(&(cell.x, cell.y)).ok_or_else(|| {
            Error::validation(
                "attention grid",
                format!("cell ({}, {}) is not a patch of slide {}", cell.x, cell.y, m.slide_id),
            )
        })?;
        let fp = r.footprint(m.mpp);
        let (x0, y0) = (cell.x / ds, cell.y / ds);
        let x1 = (cell.x + fp).div_ceil(ds).min(img.width());
        let y1 = (cell.y + fp).div_ceil(ds).min(img.height());
        let c = viridis(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = img.get_pixel_mut(x, y);
                for k in 0..3 {
                    p.0[k] = ((1.0 - a) * p.0[k] as f32 + a * c[k] as f32).round() as u8;
                }
            }
        }
    }
    Ok(img)
}

/// Level-0 origin of the highest-weight cell (first on ties).
pub fn hottest_cell(grid: &AttentionGrid) -> Option<(u32, u32)> {
    let mut best: Option<&frostmil_core::mil::GridCell> = None;
    for c in &grid.cells {
        if best.is_none_or(|b| c.weight > b.weight) {
            best = Some(c);
        }
    }
    best.map(|c| (c.x, c.y))
}

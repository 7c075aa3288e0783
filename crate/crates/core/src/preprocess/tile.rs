use super::segment::TissueMask;
use crate::error::{Error, Result};
use crate::jsonio;
use crate::synthwsi::{Rect, SlideManifest};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileConfig {
    pub patch_px: u32,
    pub target_mpp: f64,
    pub min_tissue: f64,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            patch_px: 512,
            target_mpp: 0.25,
            min_tissue: 0.5,
        }
    }
}

impl TileConfig {
    /// Grid step in level-0 pixels.
    pub fn stride(&self, slide_mpp: f64) -> Result<u32> {
        if self.patch_px == 0 {
            return Err(Error::validation("patch_px", "must be positive"));
        }
        if !(self.target_mpp > 0.0) {
            return Err(Error::validation("target_mpp", "must be positive"));
        }
        if self.target_mpp < slide_mpp {
            return Err(Error::InvalidArgument(format!(
                "upsampling not supported: target mpp {} is finer than slide mpp {slide_mpp}",
                self.target_mpp
            )));
        }
        Ok((self.patch_px as f64 * self.target_mpp / slide_mpp).round() as u32)
    }
}

/// One grid patch. `x`, `y` are level-0 coordinates; `patch_px` and `mpp`
/// describe the extraction resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub patch_px: u32,
    pub mpp: f64,
    pub tissue_fraction: f64,
    pub in_lesion: bool,
}

impl PatchRecord {
    /// Level-0 footprint side for a slide scanned at `slide_mpp`.
    pub fn footprint(&self, slide_mpp: f64) -> u32 {
        (self.patch_px as f64 * self.mpp / slide_mpp).round() as u32
    }

    pub fn rect(&self, slide_mpp: f64) -> Rect {
        let s = self.footprint(slide_mpp);
        Rect::new(self.x, self.y, s, s)
    }
}

/// Non-overlapping grid tiling, row-major by (y, x).
pub fn tile_slide(manifest: &SlideManifest, mask: &TissueMask, cfg: &TileConfig) -> Result<Vec<PatchRecord>> {
    let stride = cfg.stride(manifest.mpp)?;
    let mut out = Vec::new();
    if stride == 0 || stride > manifest.width_px || stride > manifest.height_px {
        return Ok(out);
    }
    let half = stride as u64 * stride as u64;
    for y in (0..=manifest.height_px - stride).step_by(stride as usize) {
        for x in (0..=manifest.width_px - stride).step_by(stride as usize) {
            let tissue_fraction = mask.fraction(x, y, stride);
            if tissue_fraction < cfg.min_tissue {
                continue;
            }
            let cell = Rect::new(x, y, stride, stride);
            let in_lesion = manifest.lesion_boxes.iter().any(|l| 2 * l.intersection_area(&cell) >= half);
            out.push(PatchRecord {
                slide_id: manifest.slide_id.clone(),
                x,
                y,
                patch_px: cfg.patch_px,
                mpp: cfg.target_mpp,
                tissue_fraction,
                in_lesion,
            });
        }
    }
    Ok(out)
}

pub fn write_records(records: &[PatchRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&jsonio::to_sorted_line(r)?);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PatchRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            context: format!("{} line {}", path.display(), i + 1),
            source,
        })?);
    }
    Ok(out)
}

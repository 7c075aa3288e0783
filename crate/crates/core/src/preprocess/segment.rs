use crate::error::Result;
use crate::synthwsi::{Slide, SlideManifest};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    /// Saturation below this is always background.
    pub saturation_floor: f32,
    /// Side of the majority (binary median) filter.
    pub median: usize,
    /// Components smaller than this fraction of the level area are dropped.
    pub min_component: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            saturation_floor: 0.05,
            median: 5,
            min_component: 0.001,
        }
    }
}

/// Binary tissue raster at one pyramid level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub level: usize,
    pub downsample: u32,
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl TissueMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of mask cells whose centres fall inside the level-0 square
    /// `[x, x+side) x [y, y+side)`. A footprint smaller than one cell uses the
    /// cell under its centre.
    pub fn fraction(&self, x: u32, y: u32, side: u32) -> f64 {
        let d = self.downsample as u64;
        // first cell whose centre j*d + d/2 is at or past s
        let first = |s: u64| s.saturating_sub(d / 2).div_ceil(d);
        let (x0, x1) = (first(x as u64), first(x as u64 + side as u64).min(self.width as u64));
        let (y0, y1) = (first(y as u64), first(y as u64 + side as u64).min(self.height as u64));
        if x0 >= x1 || y0 >= y1 {
            let cx = ((x as u64 + side as u64 / 2) / d).min(self.width as u64 - 1);
            let cy = ((y as u64 + side as u64 / 2) / d).min(self.height as u64 - 1);
            return if self.get(cx as u32, cy as u32) { 1.0 } else { 0.0 };
        }
        let mut on = 0usize;
        for j in y0..y1 {
            let row = (j * self.width as u64) as usize;
            on += self.data[row + x0 as usize..row + x1 as usize].iter().filter(|&&b| b).count();
        }
        on as f64 / ((x1 - x0) * (y1 - y0)) as f64
    }
}

fn saturation(p: [u8; 3]) -> f32 {
    let max = p.iter().copied().max().unwrap_or(0) as f32;
    let min = p.iter().copied().min().unwrap_or(0) as f32;
    if max == 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// Otsu threshold over a 256-bin histogram of values in [0, 1]; returns the
/// threshold and the mean of the lower class.
fn otsu(values: &[f32]) -> (f32, f32) {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[((v * 255.0).round() as usize).min(255)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t, mut best_mean) = (-1.0, 0usize, 0.0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
            best_mean = m0;
        }
    }
    if best < 0.0 {
        // single-valued histogram
        let v = values.first().copied().unwrap_or(0.0);
        return (v, v);
    }
    ((best_t as f32 + 0.5) / 255.0, best_mean as f32 / 255.0)
}

fn majority_filter(mask: &[bool], w: usize, h: usize, side: usize) -> Vec<bool> {
    if side <= 1 {
        return mask.to_vec();
    }
    let r = (side / 2) as isize;
    let need = side * side / 2 + 1;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut on = 0;
            for dy in -r..=r {
                let yy = clamp(y as isize + dy, h);
                for dx in -r..=r {
                    on += mask[yy * w + clamp(x as isize + dx, w)] as usize;
                }
            }
            out[y * w + x] = on >= need;
        }
    }
    out
}

fn drop_small_components(mask: &mut [bool], w: usize, h: usize, min_size: usize) {
    let mut seen = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        component.clear();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            component.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if component.len() < min_size {
            for &i in &component {
                mask[i] = false;
            }
        }
    }
}

/// Saturation-Otsu tissue segmentation at pyramid level `level`.
pub fn segment_tissue(slide: &Slide, level: usize, cfg: &SegmentConfig) -> Result<TissueMask> {
    let img = slide.level(level)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sat: Vec<f32> = img.pixels().map(|p| saturation(p.0)).collect();
    let (t, lower_mean) = otsu(&sat);
    // the lower class is already tissue when the whole raster is tissue
    let threshold = if lower_mean > cfg.saturation_floor {
        cfg.saturation_floor
    } else {
        t.max(cfg.saturation_floor)
    };
    let raw: Vec<bool> = sat.iter().map(|&s| s > threshold).collect();
    let mut data = majority_filter(&raw, w, h, cfg.median);
    let min_size = (cfg.min_component * (w * h) as f64).ceil() as usize;
    drop_small_components(&mut data, w, h, min_size);
    Ok(TissueMask {
        level,
        downsample: slide.manifest.levels[level],
        width: w as u32,
        height: h as u32,
        data,
    })
}

/// Coarsest level whose shorter side still has at least `min_side` pixels.
pub fn mask_level(manifest: &SlideManifest, min_side: u32) -> usize {
    (0..manifest.levels.len())
        .rev()
        .find(|&k| {
            let (w, h) = manifest.level_dims(k).unwrap_or_default();
            w.min(h) >= min_side
        })
        .unwrap_or(0)
}

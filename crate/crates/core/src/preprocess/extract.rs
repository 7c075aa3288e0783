use super::tile::PatchRecord;
use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::synthwsi::Slide;

/// Overlap weights mapping `n` input samples onto `m` output samples; each
/// row sums to one.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(n);
            (first..last)
                .filter_map(|i| {
                    let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                    (overlap > 0.0).then(|| (i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-average resample of an `n x n` window of one channel to `m x m`.
fn resample(window: &[f64], n: usize, m: usize) -> Vec<f64> {
    let w = area_weights(n, m);
    let mut rows = vec![0.0; m * n];
    for (o, taps) in w.iter().enumerate() {
        for x in 0..n {
            rows[o * n + x] = taps.iter().map(|&(i, k)| k * window[i * n + x]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for y in 0..m {
        for (o, taps) in w.iter().enumerate() {
            out[y * m + o] = taps.iter().map(|&(i, k)| k * rows[y * n + i]).sum();
        }
    }
    out
}

/// Reads a patch at level 0 and area-averages it to `[3, net_px, net_px]`
/// with values in [0, 1].
pub fn extract_patch_pixels(slide: &Slide, record: &PatchRecord, net_px: usize) -> Result<Tensor<f32>> {
    let m = &slide.manifest;
    let side = record.footprint(m.mpp);
    if side == 0
        || net_px == 0
        || record.x as u64 + side as u64 > m.width_px as u64
        || record.y as u64 + side as u64 > m.height_px as u64
    {
        return Err(Error::InvalidArgument(format!(
            "patch at ({}, {}) with side {side} lies outside slide {} ({}x{})",
            record.x, record.y, m.slide_id, m.width_px, m.height_px
        )));
    }
    let img = slide.level(0)?;
    let raw = img.as_raw();
    let n = side as usize;
    let stride = img.width() as usize * 3;
    let mut data = Vec::with_capacity(3 * net_px * net_px);
    for c in 0..3 {
        let pixel = |y: usize, x: usize| raw[(record.y as usize + y) * stride + (record.x as usize + x) * 3 + c];
        if n == net_px {
            for y in 0..n {
                for x in 0..n {
                    data.push(pixel(y, x) as f32 / 255.0);
                }
            }
            continue;
        }
        let mut window = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                window.push(pixel(y, x) as f64 / 255.0);
            }
        }
        data.extend(resample(&window, n, net_px).into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![3, net_px, net_px], data)
}

use super::manifest::{ClassDef, Rect, SlideManifest};
use super::noise::{hash2, hash_str, splitmix, unit, ValueNoise};
use crate::error::{Error, Result};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Level-0 geometry shared by the slides of a cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlideGeometry {
    pub width_px: u32,
    pub height_px: u32,
    pub mpp: f64,
    /// Side of one tiling-grid cell in level-0 pixels; lesions are sized
    /// so that at least one cell sits mostly inside them.
    pub patch_px: u32,
    pub levels: Vec<u32>,
}

impl Default for SlideGeometry {
    fn default() -> Self {
        SlideGeometry {
            width_px: 4096,
            height_px: 4096,
            mpp: 0.25,
            patch_px: 512,
            levels: vec![1, 4, 16],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TissueLayout {
    /// `min..=max` overlapping blobs inside a background margin.
    Random { min: u32, max: u32 },
    /// One tissue box covering the whole slide.
    Full,
    /// Background only.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideSpec {
    pub slide_id: String,
    pub case_id: String,
    pub class_label: u32,
    pub geometry: SlideGeometry,
    pub layout: TissueLayout,
    pub lesions: u32,
    pub lesion_contrast: f64,
    pub center_id: String,
    pub site: String,
    pub histotech_id: String,
    pub tint_gain: f64,
}

impl SlideSpec {
    pub fn new(slide_id: &str, class_label: u32, geometry: SlideGeometry) -> Self {
        SlideSpec {
            slide_id: slide_id.into(),
            case_id: slide_id.into(),
            class_label,
            geometry,
            layout: TissueLayout::Random { min: 1, max: 3 },
            lesions: 1,
            lesion_contrast: 1.0,
            center_id: "center0".into(),
            site: "site0".into(),
            histotech_id: "tech0".into(),
            tint_gain: 0.05,
        }
    }
}

/// A rendered slide: manifest plus one RGB raster per pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct Slide {
    pub manifest: SlideManifest,
    pub levels: Vec<RgbImage>,
}

impl Slide {
    pub fn level(&self, k: usize) -> Result<&RgbImage> {
        self.levels.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "slide {} has no level {k} ({} levels)",
                self.manifest.slide_id,
                self.levels.len()
            ))
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest.save(&dir.join("slide.json"))?;
        for (k, img) in self.levels.iter().enumerate() {
            img.save_with_format(dir.join(format!("level_{k}.png")), image::ImageFormat::Png)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = SlideManifest::load(&dir.join("slide.json"))?;
        let mut levels = Vec::with_capacity(manifest.levels.len());
        for k in 0..manifest.levels.len() {
            let path = dir.join(format!("level_{k}.png"));
            if !path.exists() {
                return Err(Error::NotFound(path));
            }
            let img = image::open(&path)?.to_rgb8();
            let (w, h) = manifest.level_dims(k).unwrap_or_default();
            if img.dimensions() != (w, h) {
                return Err(Error::Format {
                    path,
                    message: format!("expected {w}x{h}, found {:?}", img.dimensions()),
                });
            }
            levels.push(img);
        }
        Ok(Slide { manifest, levels })
    }
}

const BACKGROUND: [f32; 3] = [244.0, 243.0, 246.0];
const TISSUE: [f32; 3] = [226.0, 150.0, 192.0];
const TISSUE_TEXTURE: [f32; 3] = [16.0, 16.0, 10.0];
const TISSUE_DENSITY: [f32; 3] = [18.0, 22.0, 12.0];
const LESION_PALETTE: [[f32; 3]; 3] = [[118.0, 58.0, 128.0], [150.0, 60.0, 95.0], [90.0, 72.0, 140.0]];
const NUCLEUS_DARKEN: f32 = 30.0;
const NUCLEUS_CELL: u32 = 3;

struct Blob {
    cx: f32,
    cy: f32,
    inv_two_var: f32,
    bounds: Rect,
}

/// Plans tissue and lesion geometry. The raster is a pure function of the
/// returned manifest (see [`render`]).
pub fn plan_slide(seed: u64, spec: &SlideSpec, classes: &[ClassDef]) -> Result<SlideManifest> {
    let g = &spec.geometry;
    let class = classes.get(spec.class_label as usize).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "class id {} is outside the {} defined classes",
            spec.class_label,
            classes.len()
        ))
    })?;
    if g.patch_px == 0 || g.width_px < 4 * g.patch_px || g.height_px < 4 * g.patch_px {
        return Err(Error::InvalidArgument(format!(
            "slide geometry {}x{} is too small: need at least 4 x patch size ({} px) per side",
            g.width_px, g.height_px, g.patch_px
        )));
    }
    let malignant = class.malignant;
    if malignant && (spec.lesions == 0 || spec.layout == TissueLayout::Empty) {
        return Err(Error::InvalidArgument(
            "malignant slides need at least one lesion and some tissue".into(),
        ));
    }
    let coarsest = *g.levels.last().unwrap_or(&1);
    if g.width_px / coarsest == 0 || g.height_px / coarsest == 0 {
        return Err(Error::InvalidArgument("coarsest pyramid level would be empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (g.width_px, g.height_px);
    let tissue_boxes = match spec.layout {
        TissueLayout::Empty => vec![],
        TissueLayout::Full => vec![Rect::new(0, 0, w, h)],
        TissueLayout::Random { min, max } => {
            let n = rng.random_range(min.max(1)..=max.max(min).max(1));
            let margin_x = w / 32;
            let margin_y = h / 32;
            (0..n)
                .map(|_| {
                    let bw = (w as f64 * rng.random_range(0.5..0.85)) as u32;
                    let bh = (h as f64 * rng.random_range(0.5..0.85)) as u32;
                    let x = rng.random_range(margin_x..=(w - bw - margin_x).max(margin_x));
                    let y = rng.random_range(margin_y..=(h - bh - margin_y).max(margin_y));
                    Rect::new(x, y, bw, bh)
                })
                .collect()
        }
    };

    let mut lesion_boxes = Vec::new();
    if malignant {
        let lo = g.patch_px * 3 / 2;
        let hi = g.patch_px * 2;
        for _ in 0..spec.lesions {
            let t = tissue_boxes[rng.random_range(0..tissue_boxes.len())];
            let side = rng.random_range(lo..=hi).min(t.w).min(t.h);
            let x = t.x + rng.random_range(0..=t.w - side);
            let y = t.y + rng.random_range(0..=t.h - side);
            lesion_boxes.push(Rect::new(x, y, side, side));
        }
    }

    let manifest = SlideManifest {
        slide_id: spec.slide_id.clone(),
        case_id: spec.case_id.clone(),
        width_px: w,
        height_px: h,
        mpp: g.mpp,
        levels: g.levels.clone(),
        tissue_boxes,
        lesion_boxes,
        class_label: spec.class_label,
        malignant,
        center_id: spec.center_id.clone(),
        site: spec.site.clone(),
        histotech_id: spec.histotech_id.clone(),
        seed: rng.random(),
        lesion_contrast: spec.lesion_contrast,
        tint_gain: spec.tint_gain,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Per-channel gain of an acquisition center.
pub fn center_gain(center_id: &str, amplitude: f64) -> [f32; 3] {
    let h = hash_str(center_id);
    std::array::from_fn(|c| 1.0 + amplitude as f32 * (2.0 * unit(splitmix(h ^ c as u64)) - 1.0))
}

/// Renders the level-0 raster of a manifest.
pub fn render_level0(m: &SlideManifest) -> RgbImage {
    let seed = m.seed;
    let coarse = ValueNoise::new(splitmix(seed ^ 1), 64.0);
    let fine = ValueNoise::new(splitmix(seed ^ 2), 16.0);
    let lesion_tex = ValueNoise::new(splitmix(seed ^ 3), 8.0);
    let gain = center_gain(&m.center_id, m.tint_gain);
    let lesion_base = LESION_PALETTE[m.class_label as usize % LESION_PALETTE.len()];
    let contrast = m.lesion_contrast as f32;

    let mut blob_rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 4));
    let blobs: Vec<Blob> = m
        .tissue_boxes
        .iter()
        .flat_map(|t| {
            (0..3)
                .map(|_| {
                    let sigma = t.w.min(t.h) as f32 * blob_rng.random_range(0.15..0.35);
                    Blob {
                        cx: t.x as f32 + blob_rng.random_range(0.0..1.0) * t.w as f32,
                        cy: t.y as f32 + blob_rng.random_range(0.0..1.0) * t.h as f32,
                        inv_two_var: 1.0 / (2.0 * sigma * sigma),
                        bounds: *t,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let (w, h) = (m.width_px, m.height_px);
    let mut img = RgbImage::new(w, h);
    let jitter_seed = splitmix(seed ^ 5);
    let nucleus_seed = splitmix(seed ^ 6);
    for y in 0..h {
        let row_tissue: Vec<&Rect> = m.tissue_boxes.iter().filter(|t| y >= t.y && (y as u64) < t.bottom()).collect();
        let row_lesions: Vec<&Rect> = m.lesion_boxes.iter().filter(|l| y >= l.y && (y as u64) < l.bottom()).collect();
        for x in 0..w {
            let jh = hash2(jitter_seed, x as i64, y as i64);
            let in_tissue = row_tissue.iter().any(|t| t.contains_point(x, y));
            let mut px = if !in_tissue {
                let j = (unit(jh) - 0.5) * 4.0;
                [BACKGROUND[0] + j, BACKGROUND[1] + j, BACKGROUND[2] + j]
            } else {
                let tex = 0.6 * coarse.at(x, y) + 0.4 * fine.at(x, y) - 0.5;
                let density = blobs
                    .iter()
                    .filter(|b| b.bounds.contains_point(x, y))
                    .map(|b| {
                        let (dx, dy) = (x as f32 - b.cx, y as f32 - b.cy);
                        (-(dx * dx + dy * dy) * b.inv_two_var).exp()
                    })
                    .fold(0.0f32, f32::max);
                let j = (unit(jh) - 0.5) * 8.0;
                let tissue: [f32; 3] =
                    std::array::from_fn(|c| TISSUE[c] - 2.0 * tex * TISSUE_TEXTURE[c] - density * TISSUE_DENSITY[c] + j);
                if row_lesions.iter().any(|l| l.contains_point(x, y)) {
                    let nh = hash2(nucleus_seed, (x / NUCLEUS_CELL) as i64, (y / NUCLEUS_CELL) as i64);
                    let nucleus = if unit(nh) > 0.6 { NUCLEUS_DARKEN } else { 0.0 };
                    let t2 = (lesion_tex.at(x, y) - 0.5) * 12.0;
                    let jl = (unit(splitmix(jh)) - 0.5) * 12.0;
                    std::array::from_fn(|c| {
                        let lesion = lesion_base[c] - nucleus + t2 + jl;
                        tissue[c] + contrast * (lesion - tissue[c])
                    })
                } else {
                    tissue
                }
            };
            for c in 0..3 {
                px[c] = (px[c] * gain[c]).round().clamp(0.0, 255.0);
            }
            img.put_pixel(x, y, image::Rgb([px[0] as u8, px[1] as u8, px[2] as u8]));
        }
    }
    img
}

/// Area-average downsample by an integer factor; trailing partial blocks are dropped.
pub fn downsample(img: &RgbImage, factor: u32) -> RgbImage {
    if factor == 1 {
        return img.clone();
    }
    let (w, h) = (img.width() / factor, img.height() / factor);
    let mut sums = vec![0u64; (w * h * 3) as usize];
    for y in 0..h * factor {
        let row = (y / factor) * w;
        for x in 0..w * factor {
            let p = img.get_pixel(x, y).0;
            let o = ((row + x / factor) * 3) as usize;
            for c in 0..3 {
                sums[o + c] += p[c] as u64;
            }
        }
    }
    let n = (factor as u64) * (factor as u64);
    let data: Vec<u8> = sums.iter().map(|&s| ((s + n / 2) / n) as u8).collect();
    RgbImage::from_raw(w, h, data).expect("buffer sized from dimensions")
}

/// Renders every pyramid level of a manifest.
pub fn render(m: &SlideManifest) -> Vec<RgbImage> {
    let level0 = render_level0(m);
    let mut levels = Vec::with_capacity(m.levels.len());
    for &d in &m.levels[1..] {
        levels.push(downsample(&level0, d));
    }
    levels.insert(0, level0);
    levels
}

/// Plans and renders one slide.
pub fn generate_slide(seed: u64, spec: &SlideSpec, classes: &[ClassDef]) -> Result<Slide> {
    let manifest = plan_slide(seed, spec, classes)?;
    let levels = render(&manifest);
    Ok(Slide { manifest, levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SlideGeometry {
        SlideGeometry {
            width_px: 256,
            height_px: 256,
            mpp: 0.25,
            patch_px: 32,
            levels: vec![1, 4, 16],
        }
    }

    #[test]
    fn benign_has_no_lesions() {
        let s = generate_slide(7, &SlideSpec::new("a", 0, small()), &ClassDef::binary()).unwrap();
        assert!(s.manifest.lesion_boxes.is_empty());
        assert_eq!(s.levels[1].dimensions(), (64, 64));
        assert_eq!(s.levels[2].dimensions(), (16, 16));
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = SlideSpec::new("a", 1, small());
        let a = generate_slide(7, &spec, &ClassDef::binary()).unwrap();
        let b = generate_slide(7, &spec, &ClassDef::binary()).unwrap();
        assert_eq!(a.levels[0].as_raw(), b.levels[0].as_raw());
        let c = generate_slide(8, &spec, &ClassDef::binary()).unwrap();
        assert_ne!(a.levels[0].as_raw(), c.levels[0].as_raw());
    }

    #[test]
    fn too_small_rejected() {
        let mut g = small();
        g.width_px = 100;
        let err = generate_slide(1, &SlideSpec::new("a", 0, g), &ClassDef::binary()).unwrap_err();
        assert!(err.to_string().contains("too small"));
        assert!(generate_slide(1, &SlideSpec::new("a", 5, small()), &ClassDef::binary()).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = RgbImage::from_fn(4, 4, |x, _| image::Rgb([if x % 2 == 0 { 0 } else { 255 }, 10, 20]));
        let d = downsample(&img, 2);
        assert_eq!(d.get_pixel(0, 0).0, [128, 10, 20]);
    }
}

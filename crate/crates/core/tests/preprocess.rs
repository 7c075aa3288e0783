use frostmil_core::preprocess::*;
use frostmil_core::synthwsi::*;
use image::RgbImage;

fn geometry(side: u32, patch: u32, mpp: f64) -> SlideGeometry {
    SlideGeometry {
        width_px: side,
        height_px: side,
        mpp,
        patch_px: patch,
        levels: vec![1, 4, 16],
    }
}

fn slide_with(layout: TissueLayout, class: u32, side: u32, seed: u64) -> Slide {
    let mut spec = SlideSpec::new("p", class, geometry(side, side / 8, 0.25));
    spec.layout = layout;
    generate_slide(seed, &spec, &ClassDef::binary()).unwrap()
}

fn solid(side: u32, rgb: [u8; 3]) -> Slide {
    let mut s = slide_with(TissueLayout::Full, 0, side, 0);
    s.levels = s.manifest.levels.iter().map(|d| RgbImage::from_pixel(side / d, side / d, image::Rgb(rgb))).collect();
    s
}

#[test]
fn all_white_slide_gives_empty_mask_and_no_patches() {
    let s = slide_with(TissueLayout::Empty, 0, 1024, 1);
    let mask = segment_tissue(&s, 2, &SegmentConfig::default()).unwrap();
    assert_eq!(mask.count(), 0);
    assert!(tile_slide(&s.manifest, &mask, &TileConfig { patch_px: 128, ..Default::default() }).unwrap().is_empty());
}

#[test]
fn full_tissue_slide_masks_nearly_everything() {
    let s = slide_with(TissueLayout::Full, 1, 2048, 2);
    let mask = segment_tissue(&s, 2, &SegmentConfig::default()).unwrap();
    let frac = mask.count() as f64 / mask.data.len() as f64;
    assert!(frac >= 0.95, "{frac}");
}

#[test]
fn random_layout_mask_matches_ground_truth() {
    for seed in 0..5 {
        let s = slide_with(TissueLayout::Random { min: 1, max: 3 }, 1, 2048, seed);
        let mask = segment_tissue(&s, 2, &SegmentConfig::default()).unwrap();
        let d = mask.downsample;
        let (mut tissue, mut tissue_hit, mut bg, mut bg_hit) = (0, 0, 0, 0);
        for y in 0..mask.height {
            for x in 0..mask.width {
                let (cx, cy) = (x * d + d / 2, y * d + d / 2);
                if s.manifest.tissue_boxes.iter().any(|t| t.contains_point(cx, cy)) {
                    tissue += 1;
                    tissue_hit += mask.get(x, y) as usize;
                } else {
                    bg += 1;
                    bg_hit += mask.get(x, y) as usize;
                }
            }
        }
        assert!(tissue_hit as f64 >= 0.95 * tissue as f64, "seed {seed}: {tissue_hit}/{tissue}");
        assert!(bg_hit as f64 <= 0.05 * bg as f64, "seed {seed}: {bg_hit}/{bg}");
    }
}

#[test]
fn grid_of_four_on_full_tissue() {
    let s = slide_with(TissueLayout::Full, 0, 1024, 3);
    let mask = segment_tissue(&s, 2, &SegmentConfig::default()).unwrap();
    let recs = tile_slide(&s.manifest, &mask, &TileConfig::default()).unwrap();
    let xy: Vec<(u32, u32)> = recs.iter().map(|r| (r.x, r.y)).collect();
    assert_eq!(xy, vec![(0, 0), (512, 0), (0, 512), (512, 512)]);
    let none = tile_slide(&s.manifest, &mask, &TileConfig { min_tissue: 1.01, ..Default::default() }).unwrap();
    assert!(none.is_empty());
}

#[test]
fn upsampling_rejected() {
    let s = slide_with(TissueLayout::Full, 0, 1024, 3);
    let mask = segment_tissue(&s, 2, &SegmentConfig::default()).unwrap();
    let err = tile_slide(&s.manifest, &mask, &TileConfig { target_mpp: 0.1, ..Default::default() }).unwrap_err();
    assert!(err.to_string().contains("upsampling not supported"));
}

#[test]
fn half_mpp_slide_uses_double_stride_and_matches_brute_force() {
    let mut spec = SlideSpec::new("h", 1, geometry(3072, 384, 0.125));
    spec.layout = TissueLayout::Random { min: 2, max: 3 };
    let s = generate_slide(4, &spec, &ClassDef::binary()).unwrap();
    let mask = segment_tissue(&s, 2, &SegmentConfig::default()).unwrap();
    let cfg = TileConfig::default();
    let recs = tile_slide(&s.manifest, &mask, &cfg).unwrap();

    let mut expected = Vec::new();
    for gy in 0..3072 / 1024 {
        for gx in 0..3072 / 1024 {
            let (x, y) = (gx * 1024, gy * 1024);
            let (mut on, mut all) = (0, 0);
            for my in 0..mask.height {
                for mx in 0..mask.width {
                    let (cx, cy) = (mx * 16 + 8, my * 16 + 8);
                    if cx >= x && cx < x + 1024 && cy >= y && cy < y + 1024 {
                        all += 1;
                        on += mask.get(mx, my) as usize;
                    }
                }
            }
            if on as f64 / all as f64 >= 0.5 {
                expected.push((x, y));
            }
        }
    }
    assert_eq!(recs.iter().map(|r| (r.x, r.y)).collect::<Vec<_>>(), expected);
    assert!(recs.iter().all(|r| r.x % 1024 == 0 && r.y % 1024 == 0 && r.footprint(0.125) == 1024));
}

#[test]
fn tiling_invariants_on_cohort_slides() {
    let spec = CohortSpec {
        n_cases: 12,
        geometry: geometry(1024, 128, 0.25),
        ..Default::default()
    };
    let cohort = generate_cohort(8, &spec).unwrap();
    let cfg = TileConfig { patch_px: 128, ..Default::default() };
    for m in &cohort.slides {
        let slide = Slide { manifest: m.clone(), levels: render(m) };
        let mask = segment_tissue(&slide, mask_level(m, 64), &SegmentConfig::default()).unwrap();
        let recs = tile_slide(m, &mask, &cfg).unwrap();
        for (i, a) in recs.iter().enumerate() {
            assert!(a.tissue_fraction >= 0.5);
            for b in &recs[i + 1..] {
                assert_eq!(a.rect(m.mpp).intersection_area(&b.rect(m.mpp)), 0);
                assert!((a.y, a.x) < (b.y, b.x));
            }
        }
        for l in &m.lesion_boxes {
            assert!(recs.iter().any(|r| r.in_lesion && r.rect(m.mpp).intersection_area(l) > 0), "{}", m.slide_id);
        }
        let strict = tile_slide(m, &mask, &TileConfig { min_tissue: 0.8, ..cfg.clone() }).unwrap();
        assert!(strict.iter().all(|r| recs.contains(r)));
    }
}

#[test]
fn constant_patch_extracts_constant() {
    let s = solid(1024, [128, 128, 128]);
    let rec = PatchRecord {
        slide_id: "p".into(),
        x: 512,
        y: 0,
        patch_px: 512,
        mpp: 0.25,
        tissue_fraction: 1.0,
        in_lesion: false,
    };
    let t = extract_patch_pixels(&s, &rec, 224).unwrap();
    assert_eq!(t.shape(), &[3, 224, 224]);
    assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() <= 1e-6));
}

#[test]
fn identity_resize_is_bitwise_and_out_of_bounds_errors() {
    let s = slide_with(TissueLayout::Full, 1, 256, 5);
    let rec = PatchRecord {
        slide_id: "p".into(),
        x: 32,
        y: 64,
        patch_px: 32,
        mpp: 0.25,
        tissue_fraction: 1.0,
        in_lesion: false,
    };
    let t = extract_patch_pixels(&s, &rec, 32).unwrap();
    let img = &s.levels[0];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let expect = img.get_pixel(32 + x, 64 + y).0[c] as f32 / 255.0;
                assert_eq!(t.data()[c * 1024 + (y * 32 + x) as usize].to_bits(), expect.to_bits());
            }
        }
    }
    let far = PatchRecord { x: 240, ..rec };
    assert!(extract_patch_pixels(&s, &far, 32).is_err());
}

#[test]
fn two_by_two_checkerboard_averages_to_mean() {
    let mut s = solid(64, [0, 0, 0]);
    s.levels[0].put_pixel(1, 0, image::Rgb([200, 100, 50]));
    s.levels[0].put_pixel(0, 1, image::Rgb([200, 100, 50]));
    let rec = PatchRecord {
        slide_id: "p".into(),
        x: 0,
        y: 0,
        patch_px: 2,
        mpp: 0.25,
        tissue_fraction: 1.0,
        in_lesion: false,
    };
    let t = extract_patch_pixels(&s, &rec, 1).unwrap();
    let expect = [100.0 / 255.0, 50.0 / 255.0, 25.0 / 255.0];
    for c in 0..3 {
        assert!((t.data()[c] - expect[c]).abs() < 1e-6);
    }
}

#[test]
fn balancing_is_repeatable() {
    let recs: Vec<(String, u32)> = (0..150).map(|i| (if i < 100 { "A" } else { "B" }.to_string(), i)).collect();
    let a = balance_centers(&recs, |r| r.0.clone(), Some(30), 42);
    let b = balance_centers(&recs, |r| r.0.clone(), Some(30), 42);
    assert_eq!(a, b);
    assert_eq!(a.len(), 60);
}

#[test]
fn records_jsonl_round_trip_with_sorted_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let recs = vec![PatchRecord {
        slide_id: "s".into(),
        x: 0,
        y: 512,
        patch_px: 512,
        mpp: 0.25,
        tissue_fraction: 0.75,
        in_lesion: true,
    }];
    write_records(&recs, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("{\"in_lesion\":true,\"mpp\":0.25,\"patch_px\":512,\"slide_id\":\"s\""));
    assert_eq!(read_records(&path).unwrap(), recs);
}

//! Deterministic synthetic slides and cohorts.

pub mod cohort;
pub mod manifest;
pub mod noise;
pub mod slide;

pub use cohort::{apportion, generate_cohort, CohortSpec};
pub use manifest::{CaseEntry, ClassDef, CohortManifest, MetastasisSize, Rect, SlideManifest, Split};
pub use slide::{downsample, generate_slide, plan_slide, render, Slide, SlideGeometry, SlideSpec, TissueLayout};

use crate::error::Result;
use std::path::Path;

pub fn save_manifest(manifest: &CohortManifest, path: &Path) -> Result<()> {
    manifest.save(path)
}

pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    CohortManifest::load(path)
}

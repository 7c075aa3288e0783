//! Slide-to-patch stage: tissue masks, grid tiling, pixel extraction and
//! per-center balancing.

pub mod balance;
pub mod extract;
pub mod segment;
pub mod tile;

pub use balance::{balance_centers, median_cap};
pub use extract::extract_patch_pixels;
pub use segment::{mask_level, segment_tissue, SegmentConfig, TissueMask};
pub use tile::{read_records, tile_slide, write_records, PatchRecord, TileConfig};

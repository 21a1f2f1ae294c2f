//! Entropy-based segmentation of unwrapped phase maps into single-cell
//! patches: entropy map, threshold, area filter, touching-cell separation,
//! overlap exclusion and 60×60 cropping.

mod crop;
mod entropy;
mod extract;
mod segment;

pub use crop::{crop_patches, read_patch, write_patch, PatchLabel, RbcPatch, PATCH_SIDE};
pub use entropy::{entropy_map, entropy_map_with_span, histogram_entropy, EntropyMap};
pub use extract::{extract_cells, label_patches, ExtractParams, Extraction};
pub use segment::{
    classify_overlap, distance_seeds, distance_transform, patch_box, reject_artifacts, segment_cells,
    split_touching, OverlapClass, Segmentation, SplitParams,
};

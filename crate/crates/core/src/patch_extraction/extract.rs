use log::warn;

use super::crop::{crop_patches, RbcPatch};
use super::entropy::entropy_map_with_span;
use super::segment::{classify_overlap, reject_artifacts, segment_cells, split_touching, OverlapClass, SplitParams};
use crate::error::{QpiError, Result};
use crate::forward_model::io::CellAnnotation;
use crate::forward_model::{Channel, PerChannel, PhaseMap};
use crate::imaging::{fill_holes, label_components, Component};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractParams {
    /// Channel whose phase drives segmentation.
    pub channel: Channel,
    pub window_px: usize,
    pub bins: usize,
    /// Lower bound on the quantised phase range, in radians.
    pub min_span_rad: f64,
    pub threshold: f64,
    pub min_area: usize,
    pub margin_px: usize,
    pub split: SplitParams,
    pub median_cell_area: f64,
    /// Fragments below this share of `median_cell_area` mark an overlap.
    pub overlap_fraction: f64,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            channel: Channel::Red,
            window_px: 9,
            bins: 32,
            min_span_rad: 1.0,
            threshold: 1.0,
            min_area: 1600,
            margin_px: 2,
            split: SplitParams::default(),
            // Disk of radius 24 px, the middle of the synthetic cell sizes.
            median_cell_area: std::f64::consts::PI * 24.0 * 24.0,
            overlap_fraction: 0.5,
        }
    }
}

impl ExtractParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(QpiError::Config(format!("entropy threshold must be positive, got {}", self.threshold)));
        }
        if !(self.median_cell_area > 0.0) || !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(QpiError::Config("overlap rule needs a positive median area and a fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub patches: Vec<RbcPatch>,
    /// Cell components each patch was cropped from, index-aligned.
    pub components: Vec<Component>,
    pub artifacts_rejected: usize,
    pub overlapping_excluded: usize,
    pub empty_skipped: usize,
}

/// Runs segmentation on one field of view and crops every accepted cell
/// from all three channels.
pub fn extract_cells(phases: &PerChannel<PhaseMap>, subject_id: &str, params: &ExtractParams) -> Result<Extraction> {
    params.validate()?;
    let em = entropy_map_with_span(phases.get(params.channel), params.window_px, params.bins, params.min_span_rad)?;
    let seg = segment_cells(&em, params.threshold)?;
    // Flat cell centres read as low entropy; close them before labelling.
    let components = label_components(&fill_holes(&seg.mask));
    let total = components.len();
    let kept = reject_artifacts(components, params.min_area);
    let artifacts_rejected = total - kept.len();

    let mut cells = Vec::new();
    let mut overlapping_excluded = 0;
    for comp in &kept {
        let parts = split_touching(comp, &params.split);
        match classify_overlap(&parts, params.median_cell_area, params.overlap_fraction) {
            OverlapClass::Separable => cells.extend(parts),
            OverlapClass::Overlapping => overlapping_excluded += 1,
        }
    }
    let (patches, empty_skipped) = crop_patches(&cells, phases, subject_id, params.margin_px)?;
    if empty_skipped > 0 {
        warn!("{subject_id}: skipped {empty_skipped} empty components");
    }
    Ok(Extraction {
        patches,
        components: cells,
        artifacts_rejected,
        overlapping_excluded,
        empty_skipped,
    })
}

/// Labels each patch with the single annotated cell whose centre lies in
/// its component's bounding box. Patches matching no cell, or several,
/// stay unlabelled; the count of those is returned.
pub fn label_patches(extraction: &mut Extraction, annotations: &[CellAnnotation]) -> usize {
    let mut unmatched = 0;
    for (patch, comp) in extraction.patches.iter_mut().zip(&extraction.components) {
        let mut hits = annotations
            .iter()
            .filter(|a| comp.bbox.contains(a.center.0, a.center.1));
        match (hits.next(), hits.next()) {
            (Some(a), None) => patch.label = Some(a.class),
            _ => {
                patch.label = None;
                unmatched += 1;
            }
        }
    }
    unmatched
}

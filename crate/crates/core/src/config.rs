//! The single declarative document that drives a pipeline run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cnn::TrainConfig;
use crate::dataset::{BuildOptions, SubjectQuota, Task};
use crate::error::{QpiError, Result};
use crate::forward_model::{check_carrier, sample_pixel_um, Channel, FringeParams, DEFAULT_CANVAS, DEFAULT_CARRIER};
use crate::patch_extraction::{ExtractParams, SplitParams, PATCH_SIDE};
use crate::phase_retrieval::{FilterOptions, RetrievalConfig, SpectralBin, SpectralFilter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every named sub-seed.
    pub seed: u64,
    pub synth: SynthSection,
    pub retrieval: RetrievalSection,
    pub extraction: ExtractionSection,
    pub dataset: DatasetSection,
    /// Training hyper-parameters; the seed is derived from the root seed.
    pub train: TrainConfig,
    pub eval: EvalSection,
}

/// Subjects per class (healthy, early, late) in each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectCounts {
    pub train: [usize; 3],
    pub val: [usize; 3],
    pub test: [usize; 3],
}

impl From<SubjectCounts> for SubjectQuota {
    fn from(c: SubjectCounts) -> Self {
        SubjectQuota {
            train: c.train,
            val: c.val,
            test: c.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub subjects: SubjectCounts,
    pub fovs_per_subject: usize,
    pub cells_per_fov: usize,
    /// `[rows, cols]`.
    pub fov: [usize; 2],
    /// `[fx, fy]` in cycles per pixel.
    pub carrier: [f64; 2],
    pub noise_sigma: f64,
    pub cell_radius_px: [f64; 2],
    pub red_peak_rad: [f64; 2],
    pub min_gap_px: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            subjects: SubjectCounts {
                train: [5, 10, 7],
                val: [2, 3, 4],
                test: [1, 2, 2],
            },
            fovs_per_subject: 18,
            cells_per_fov: 5,
            fov: [DEFAULT_CANVAS.0, DEFAULT_CANVAS.1],
            carrier: [DEFAULT_CARRIER.0, DEFAULT_CARRIER.1],
            noise_sigma: FringeParams::default().noise_sigma,
            cell_radius_px: [23.0, 25.0],
            red_peak_rad: [1.6, 2.0],
            min_gap_px: 14.0,
        }
    }
}

impl SynthSection {
    pub fn fringe(&self) -> FringeParams {
        FringeParams {
            carrier: (self.carrier[0], self.carrier[1]),
            noise_sigma: self.noise_sigma,
            ..FringeParams::default()
        }
    }

    pub fn cell_radius_um(&self) -> (f64, f64) {
        (
            self.cell_radius_px[0] * sample_pixel_um(),
            self.cell_radius_px[1] * sample_pixel_um(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    /// Pass-band radius; half the carrier distance when absent.
    pub radius_bins: Option<f64>,
    pub hann_window: bool,
    pub reference_correction: bool,
    pub plane_fit: bool,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let d = RetrievalConfig::default();
        Self {
            radius_bins: d.filter.radius_bins,
            hann_window: d.filter.hann_window,
            reference_correction: d.filter.reference_correction,
            plane_fit: d.plane_fit,
        }
    }
}

impl RetrievalSection {
    pub fn to_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            filter: FilterOptions {
                filter: None,
                radius_bins: self.radius_bins,
                hann_window: self.hann_window,
                reference_correction: self.reference_correction,
            },
            plane_fit: self.plane_fit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSection {
    pub channel: Channel,
    pub window_px: usize,
    pub bins: usize,
    pub min_span_rad: f64,
    pub threshold: f64,
    pub min_area: usize,
    pub margin_px: usize,
    pub min_seed_separation_px: f64,
    pub median_cell_area: f64,
    pub overlap_fraction: f64,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        let d = ExtractParams::default();
        Self {
            channel: d.channel,
            window_px: d.window_px,
            bins: d.bins,
            min_span_rad: d.min_span_rad,
            threshold: d.threshold,
            min_area: d.min_area,
            margin_px: d.margin_px,
            min_seed_separation_px: d.split.min_seed_separation_px,
            median_cell_area: d.median_cell_area,
            overlap_fraction: d.overlap_fraction,
        }
    }
}

impl ExtractionSection {
    pub fn to_params(&self) -> ExtractParams {
        ExtractParams {
            channel: self.channel,
            window_px: self.window_px,
            bins: self.bins,
            min_span_rad: self.min_span_rad,
            threshold: self.threshold,
            min_area: self.min_area,
            margin_px: self.margin_px,
            split: SplitParams {
                min_seed_separation_px: self.min_seed_separation_px,
            },
            median_cell_area: self.median_cell_area,
            overlap_fraction: self.overlap_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub per_class: usize,
    pub augment_train: bool,
    pub augment_val: bool,
    pub channels_as_samples: bool,
    /// Network input side; patches are upsampled to it.
    pub input_side: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = BuildOptions::default();
        Self {
            per_class: d.per_class,
            augment_train: d.augment_train,
            augment_val: d.augment_val,
            channels_as_samples: d.channels_as_samples,
            input_side: crate::cnn::INPUT_SIDE,
        }
    }
}

impl DatasetSection {
    pub fn build_options(&self, seed: u64) -> BuildOptions {
        BuildOptions {
            per_class: self.per_class,
            augment_train: self.augment_train,
            augment_val: self.augment_val,
            channels_as_samples: self.channels_as_samples,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    pub tasks: Vec<Task>,
    /// Passes over the timing images; 0 skips timing.
    pub timing_repeats: usize,
    pub timing_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            tasks: Task::ALL.to_vec(),
            timing_repeats: 10,
            timing_images: 4,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            synth: SynthSection::default(),
            retrieval: RetrievalSection::default(),
            extraction: ExtractionSection::default(),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QpiError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            QpiError::Config(reason) => QpiError::format(path, reason),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| QpiError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QpiError::Config(e.to_string()))
    }
}

/// Checks every section against its module's preconditions plus the
/// cross-section constraints. Returns one message per violation.
pub fn validate_config(config: &PipelineConfig) -> Vec<String> {
    let mut v = Vec::new();
    let s = &config.synth;
    let [rows, cols] = s.fov;
    if rows < 64 || cols < 64 {
        v.push(format!("synth.fov {rows}x{cols} is below the 64x64 minimum"));
    }
    if let Err(e) = check_carrier((s.carrier[0], s.carrier[1])) {
        v.push(format!("synth.carrier: {e}"));
    } else if rows >= 4 && cols >= 4 {
        let center = SpectralBin::from_carrier((s.carrier[0], s.carrier[1]), (rows, cols));
        let filter = match config.retrieval.radius_bins {
            Some(radius_bins) => SpectralFilter { center, radius_bins },
            None => SpectralFilter::around(center),
        };
        if let Err(e) = filter.validate((rows, cols)) {
            v.push(format!(
                "retrieval.radius_bins with synth.carrier ({}, {}) on {rows}x{cols} frames: {e}",
                s.carrier[0], s.carrier[1]
            ));
        }
    }
    if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
        v.push("synth.noise_sigma must be finite and non-negative".into());
    }
    if !(s.cell_radius_px[0] > 0.0 && s.cell_radius_px[1] >= s.cell_radius_px[0]) {
        v.push("synth.cell_radius_px must be positive and ordered".into());
    }
    if !(s.red_peak_rad[0] > 0.0 && s.red_peak_rad[1] >= s.red_peak_rad[0]) {
        v.push("synth.red_peak_rad must be positive and ordered".into());
    }
    if s.cells_per_fov == 0 || s.fovs_per_subject == 0 {
        v.push("synth.cells_per_fov and synth.fovs_per_subject must be positive".into());
    }
    let cell = 2.0 * s.cell_radius_px[1] + s.min_gap_px;
    if cell * cell * s.cells_per_fov as f64 > 0.6 * (rows * cols) as f64 {
        v.push(format!(
            "synth.cells_per_fov {} cannot be packed into {rows}x{cols} with radius {} and gap {}",
            s.cells_per_fov, s.cell_radius_px[1], s.min_gap_px
        ));
    }
    for (c, name) in ["healthy", "early", "late"].iter().enumerate() {
        if s.subjects.train[c] == 0 || s.subjects.val[c] == 0 {
            v.push(format!("synth.subjects needs at least one {name} subject in train and in val"));
        }
    }

    let e = &config.extraction;
    if let Err(err) = e.to_params().validate() {
        v.push(format!("extraction: {err}"));
    }
    if e.window_px % 2 == 0 || e.window_px < 3 {
        v.push(format!("extraction.window_px {} must be odd and at least 3", e.window_px));
    }
    if e.bins < 2 {
        v.push("extraction.bins must be at least 2".into());
    }
    if e.min_area == 0 {
        v.push("extraction.min_area must be positive".into());
    }

    let d = &config.dataset;
    if d.per_class == 0 {
        v.push("dataset.per_class must be positive".into());
    }
    if d.input_side < PATCH_SIDE / 4 {
        v.push(format!("dataset.input_side {} is too small", d.input_side));
    }
    let expected = s.cells_per_fov * s.fovs_per_subject;
    let supply = (0..3)
        .map(|c| (s.subjects.train[c] + s.subjects.val[c]) * expected)
        .min()
        .unwrap_or(0);
    if d.per_class > supply {
        v.push(format!(
            "dataset.per_class {} exceeds the {supply} cells per class that synth.subjects can produce",
            d.per_class
        ));
    }

    if let Err(err) = config.train.validate() {
        v.push(format!("train: {err}"));
    }
    if !(0.0..1.0).contains(&config.train.momentum) {
        v.push(format!("train.momentum {} must lie in [0, 1)", config.train.momentum));
    }
    let per_split = d.per_class as f64 * 0.5;
    if (config.train.batch_size as f64) > per_split * 2.0 {
        v.push(format!(
            "train.batch_size {} exceeds the training set implied by dataset.per_class {}",
            config.train.batch_size, d.per_class
        ));
    }

    let ev = &config.eval;
    if !(0.0..=1.0).contains(&ev.threshold) {
        v.push(format!("eval.threshold {} must lie in [0, 1]", ev.threshold));
    }
    if ev.tasks.is_empty() {
        v.push("eval.tasks must name at least one task".into());
    }
    if ev.timing_repeats != 0 && ev.timing_repeats < 10 {
        v.push("eval.timing_repeats must be 0 or at least 10".into());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = PipelineConfig::default();
        assert_eq!(validate_config(&c), Vec::<String>::new());
        let back = PipelineConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn low_carrier_with_wide_filter_overlaps_dc() {
        let mut c = PipelineConfig::default();
        c.synth.fov = [128, 128];
        c.synth.cells_per_fov = 2;
        c.synth.carrier = [0.01, 0.0];
        c.retrieval.radius_bins = Some(20.0);
        let v = validate_config(&c);
        assert!(v.iter().any(|m| m.contains("order overlap")), "{v:?}");
    }

    #[test]
    fn momentum_out_of_range() {
        let mut c = PipelineConfig::default();
        c.train.momentum = 1.5;
        let v = validate_config(&c);
        assert!(v.iter().any(|m| m.contains("momentum")), "{v:?}");
    }

    #[test]
    fn sections_are_optional_and_unknown_keys_rejected() {
        let c = PipelineConfig::parse("seed = 3\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.lr0, 1e-4);
        assert!(PipelineConfig::parse("[train]\nepoch = 2\n").is_err());
    }
}

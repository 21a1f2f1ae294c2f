//! Multi-wavelength quantitative phase imaging pipeline for staging
//! malaria-infected red blood cells.
//!
//! The stages, in pipeline order:
//!
//! - [`forward_model`]: synthetic cells and off-axis interferograms at 632,
//!   532 and 460 nm
//! - [`phase_retrieval`]: Fourier fringe analysis and Goldstein branch-cut
//!   unwrapping
//! - [`patch_extraction`]: entropy segmentation, artifact rejection,
//!   touching-cell separation and 60×60 patch cropping
//! - [`dataset`]: class balancing, rotation augmentation, subject-wise
//!   splits and minibatches
//! - [`cnn`]: the five-convolution classifier and its SGD trainer
//! - [`metrics`]: sensitivity, specificity, accuracy, MCC, ROC/AUC and timing
//!
//! [`coherence`] evaluates the source coherence and resolution formulas and
//! [`pipeline`] ties the stages together.

pub mod audit;
pub mod cnn;
pub mod coherence;
pub mod config;
pub mod dataset;
pub mod error;
pub mod forward_model;
pub mod imaging;
pub mod metrics;
pub mod patch_extraction;
pub mod phase_retrieval;
pub mod pipeline;
pub mod seed;

pub use error::{QpiError, Result};

//! Low-shot classification correction for object detectors.
//!
//! A separate correction network is trained on proposals sampled from a base
//! detector (foreground, false positives and background). At inference time
//! its cosine-classifier probabilities are multiplied element-wise into the
//! detector's per-class scores, suppressing false positives on data-rare
//! (novel) classes while leaving boxes untouched.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`] box arithmetic and Gaussian box jitter
//! * [`datamodel`] manifests, k-shot splits, detection files
//! * [`detsim`] synthetic shapes dataset and a base-detector simulator
//! * [`netcore`] the convolutional trunk with a compact non-local block
//! * [`classifier`] cosine head, imprinting, background-weight inference
//! * [`losses`] cross-entropy plus the two margin regularizers
//! * [`sampler`] proposal grouping, batch construction, ROI cropping
//! * [`trainer`] two-phase optimization
//! * [`fusion`] score refinement at inference
//! * [`eval`] average precision and the diagnostic analyses
//! * [`benchmark`] the end-to-end synthetic benchmark

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod classifier;
pub mod datamodel;
pub mod detsim;
mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod netcore;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use classifier::CosineHead;
pub use datamodel::{Annotation, DatasetManifest, Detection, ImageRecord, KShotSplit};
pub use error::{Error, Result};
pub use geometry::BoundingBox;
pub use image::Image;
pub use netcore::{CorrectionModel, FeatureExtractorConfig};

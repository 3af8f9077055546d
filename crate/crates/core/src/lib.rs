//! Refines coarse region annotations on whole-slide-image patch grids into
//! per-patch labels.
//!
//! The pipeline runs on precomputed patch embeddings:
//!
//! 1. [`prototype`]: k-means prototypes per slide, then clustered again across slides.
//! 2. [`pseudo`]: prototypes dominating the coarse annotation become major
//!    prototypes; patches similar enough to one are relabelled positive.
//! 3. [`classifier`]: a focal-loss head trained on class-balanced batches,
//!    then re-finetuned on its own predictions over the whole slide.
//! 4. [`metrics`]: Dice, IoU and the usual confusion-matrix ratios.
//!
//! [`synth`] generates cohorts with planted structure and ground truth.

pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod kmeans;
pub mod metrics;
pub mod pipeline;
pub mod prototype;
pub mod pseudo;
pub mod render;
pub mod synth;

pub use config::{MajorRule, RefineConfig};
pub use error::{Error, ErrorKind, Result};

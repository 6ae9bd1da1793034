//! Two-branch spatial/frequency fusion transformer for coronal-slice
//! classification of registered brain volumes, plus the surrounding
//! experimental pipeline: volume ingestion, slice selection,
//! center-stratified subject-level cross-validation, training with
//! SGD-momentum under a cosine schedule, slice-level majority voting,
//! and confusion-matrix metric reporting.
//!
//! Everything is built on a small dense-tensor library with reverse-mode
//! differentiation ([`tensor`]) and an FFT/global-filter kernel
//! ([`spectral`]); no external ML framework is involved. See the crate's
//! `examples/` directory for one runnable walkthrough per capability.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gfnet;
pub mod gradcheck;
pub mod model;
pub mod spectral;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};

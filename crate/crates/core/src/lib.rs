//! Scale-normalized image pyramid toolkit.
//!
//! The crate plans image pyramids, decides which ground truths, anchors,
//! proposals and detections are scale-valid at each pyramid level, samples
//! training chips, fuses multi-scale detections and evaluates detection and
//! proposal quality with the COCO protocol. A synthetic resolution-quality
//! detector ([`sim`]) stands in for a trained network so training protocols
//! can be compared without GPUs.
//!
//! Per-image work fans out over rayon when the `parallel` feature is enabled
//! (the default). Without it every entry point runs sequentially and produces
//! the same output.

pub mod anchors;
pub mod chips;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod filter;
pub mod fusion;
pub mod geometry;
pub mod par;
pub mod pyramid;
pub mod sim;

pub use error::{Error, Result};
pub use geometry::{BBox, ImageSize};
pub use pyramid::{PyramidPlan, ResolutionSpec};

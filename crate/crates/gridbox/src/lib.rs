//! Simulation workbench for cascaded grid-point box refinement.
//!
//! The library models a two-part detection post-processing pipeline on
//! synthetic scenes:
//!
//! * a cascade of localization stages, each of which predicts a small grid
//!   of keypoint heatmaps over an extended region around a candidate box,
//!   decodes the grid back to image space and fuses the points into a
//!   refined box, with the region shrinking stage by stage;
//! * a calibrated scoring head that blends the classification confidence
//!   with two localization-quality scores via a geometric mean, so that the
//!   final ranking reflects where the box ended up rather than where the
//!   proposal started.
//!
//! Everything is deterministic: scene generation, heatmap oracles, toy
//! models and the evaluator all derive their randomness from explicit
//! seeds, and results are bitwise reproducible for a given config. The
//! `rayon` feature (on by default) parallelizes per-box and per-scene
//! loops without changing any output; disable default features for a
//! strictly sequential build.
//!
//! Feature combinations exercised in CI:
//!
//! * default (`rayon`): data-parallel loops.
//! * `--no-default-features`: sequential fallback, identical outputs.

pub mod cascade;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod gridcodec;
pub mod harness;
pub mod mlp;
mod par;
pub mod predictor;
pub mod rng;
pub mod scenario;
pub mod scoring;

pub use error::{Error, Result};
pub use geometry::{BBox, ImageBounds};

//! Surrogate pipeline for stretch bending of slender elastic-plastic profiles.
//!
//! The crate covers the full desk-scale workflow: a deterministic synthetic
//! physics oracle that bends workpieces around bi-elliptic molds and applies
//! springback, a signed-distance-field representation of cross-sections, a
//! token-sequence deformation model with a two-stage attention predictor,
//! the training loop with three partitioned optimizers, evaluation metrics
//! (MAD, 3D IoU, tail error), and an inverse mold-design loop based on
//! displacement compensation.

pub mod config;
pub mod design;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod section;
pub mod tensor;
pub mod train;

#[cfg(feature = "cli")]
pub mod cli;

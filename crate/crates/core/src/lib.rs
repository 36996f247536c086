//! Glance-and-focus adaptive inference.
//!
//! A sequential classifier that first processes a downsampled glance of the
//! input image, then full-resolution patches at locations chosen by a
//! reinforcement-learned proposal network, exiting early once its softmax
//! confidence clears a calibrated per-step threshold. The crate contains the
//! tensor/autodiff substrate, the data pipeline, the four-component model,
//! the staged trainer (including PPO for the proposal network), exit-budget
//! calibration, the inference engine, and compute accounting.

pub mod budget;
pub mod dataio;
pub mod engine;
pub mod error;
pub mod model;
pub mod numcore;
pub mod profile;
pub mod rng;
pub mod trainer;

pub use error::{FormatError, GfError, Result};

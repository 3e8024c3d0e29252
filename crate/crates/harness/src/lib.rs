//! Experiment orchestration for self-modulated GAN studies: the
//! configuration grid, seed aggregation, baseline comparisons, layer
//! ablation and report emission.

pub mod ablation;
pub mod compare;
pub mod config;
pub mod error;
pub mod fixture;
pub mod grid;
pub mod report;
pub mod stats;

pub use error::{HarnessError, Result};

//! Learning with class-conditional label noise through the small-loss
//! criterion.
//!
//! The crate is organised bottom-up:
//!
//! - [`noise`]: transition matrices, noise recipes and label corruption.
//! - [`data`]: synthetic Gaussian tasks with a known nearest-centroid target concept.
//! - [`oracle`]: the closed-form noisy-risk minimiser and exhaustive checks of the
//!   small-loss theory on finite instance spaces.
//! - [`model`] and [`trainer`]: softmax / one-hidden-layer networks with hand-written
//!   backprop, SGD warm-up and the per-example [`trainer::LossLedger`].
//! - [`selection`]: class-wise mean-loss selection with the `prop`/`num` budgets,
//!   plus the global and single-epoch ablations.
//! - [`ssl`]: per-example weights and a feature-space weighted MixMatch stage.
//! - [`analysis`]: KDE, loss partitions, model-distance sweeps and accuracy traces.
//! - [`runner`]: configuration, pipelines, sweeps and artifact persistence.

pub mod analysis;
pub mod data;
pub mod error;
pub mod model;
pub mod noise;
pub mod oracle;
pub mod runner;
pub mod selection;
pub mod ssl;
pub mod trainer;
mod util;

pub use error::{Error, Result};

//! Desk-scale semi-supervised learning laboratory.
//!
//! The crate trains small MLP classifiers on synthetic 2-D datasets with the
//! pseudo-labeling loss family (hard and smooth thresholding, with and
//! without weak/strong view pairs), runs fold-sampled benchmarks, and
//! compares methods with exact paired statistics.
//!
//! Module layout:
//!
//! - [`diffcore`] — minimal reverse-mode autodiff tape, MLP forward/backward,
//!   SGD with momentum, weight decay, cosine scheduling and EMA tracking.
//! - [`losses`] — the loss family: shape factors, hard/smooth pseudo-label
//!   terms, consistency losses on view pairs, and weight calibration.
//! - [`data`] — synthetic datasets, weak/strong augmentations and the three
//!   fold-sampling protocols.
//! - [`metrics`] — confusion matrices, collapse detection, pseudo-label
//!   coverage/purity and the exact Wilcoxon signed-rank test.
//! - [`experiment`] — the training loop, benchmarks, sweeps, calibration and
//!   persistence.

pub mod data;
pub mod diffcore;
mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;

pub use error::{Error, Result};

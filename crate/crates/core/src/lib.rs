//! Fine-grained cross-modal fusion for multimodal aspect-category sentiment
//! analysis.
//!
//! The crate implements, from the numerics up, a desk-scale version of a
//! text+image aspect-category sentiment model:
//!
//! - [`numerics`]: `f64` tensors, forward kernels, a define-by-run compute
//!   graph with reverse-mode autodiff, and finite-difference grad checking.
//! - [`datamodel`]: samples, aspect categories, text preprocessing,
//!   vocabulary, dataset and feature-container I/O, synthetic data.
//! - [`perception`]: image/RoI category heads and visual projections.
//! - [`textenc`]: auxiliary-sentence construction and a transformer text
//!   encoder trained from scratch.
//! - [`fusion`]: image-guided cross-modal attention, geometry-aware object
//!   relation attention, multimodal fusion, and the sentiment classifier.
//! - [`training`]: loss, Adam, the training loop, and checkpointing.
//! - [`metrics`]: precision/recall/F1, Cohen's kappa, IoU, and annotation
//!   agreement reports.
//!
//! Everything is deterministic given a master seed: random streams are named
//! and derived, never shared, so identical configurations reproduce results
//! bit-for-bit.

#![forbid(unsafe_code)]

pub mod datamodel;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod perception;
pub mod rng;
pub mod textenc;
pub mod training;

pub use error::{Error, Result};

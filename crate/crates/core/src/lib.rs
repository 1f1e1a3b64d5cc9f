//! Kolmogorov-Arnold geometry (KAG) measurements for two-layer MNIST MLPs.
//!
//! The crate trains small GELU MLPs from scratch, computes exact
//! input-to-hidden Jacobians, and measures how concentrated the
//! distribution of their `k×k` minors is compared with the network's own
//! random initialization:
//!
//! - [`mnist`]: IDX parsing, normalization, translation augmentation.
//! - [`mlp`]: parameters, forward pass, analytic Jacobians, AdamW training,
//!   snapshots.
//! - [`minors`]: seeded row/column combination sampling and chunked minor
//!   evaluation.
//! - [`metrics`]: participation ratio, histogram KL divergence, rotation
//!   ratio, zero-row fraction.
//! - [`spatial`]: Euclidean balls, rectangular patches and separated-pixel
//!   constraints on the 28×28 grid.
//! - [`experiment`]: multi-seed sweeps with a resumable manifest,
//!   aggregation and CSV/JSON/SVG reporting.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod metrics;
pub mod minors;
pub mod mlp;
pub mod mnist;
pub mod seed;
pub mod spatial;

pub use error::{Error, Result};
pub use metrics::{participation_ratio, MetricsRecord};
pub use minors::{CombinationSet, MinorCaps, MinorPlan, MinorSample};
pub use mlp::{JacobianMatrix, Layer, MlpParams, ModelSnapshot, Regime, TrainConfig};
pub use mnist::{ImageSet, LabelSet, MnistData, NormalizationSpec};
pub use spatial::{PixelMask, SeparationConstraint};

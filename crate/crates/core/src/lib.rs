//! Egocentric video dataset curation.
//!
//! Measures per-video ego-properties (action semantics, camera motion,
//! blurriness, hand/object location, hand pose), fits diagonal-Gaussian
//! kernel density models over them, and uses the resulting likelihoods to
//! select, prune and replace videos when building balanced datasets. A set
//! of reference loss functions over plain feature matrices is included for
//! numerical verification.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bundle;
pub mod counterfactual;
pub mod error;
pub mod jsonl;
pub mod kde;
pub mod losses;
pub mod manifest;
pub mod matrix;
pub mod pca;
pub mod props;
pub mod report;
pub mod select;

pub use error::{Error, Result};
pub use matrix::Matrix;

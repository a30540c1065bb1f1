//! Adaptive-scale robust sparse linear regression.
//!
//! The pipeline: bracket the noise scale with a median-of-means estimate,
//! fit l1-penalized weighted Huber regressions over a geometric grid of
//! Huber parameters, pick one by Lepski's pairwise comparison rule, then
//! apply a one-step score correction (with a graphical-Lasso precision
//! matrix) and build confidence regions.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too; published
// approximation coefficients are kept digit for digit.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod glasso;
pub mod huber;
pub mod inference;
pub mod lepski;
mod quad;
pub mod rng;
pub mod scale;
pub mod score;

pub use error::{Error, Result};

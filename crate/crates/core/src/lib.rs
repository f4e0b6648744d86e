//! Survivor average causal effects in multi-arm trials subject to truncation by death.
//!
//! The crate covers principal-score weighting, outcome regression and doubly/triply
//! robust estimators of stratum-specific mean potential outcomes, sandwich-variance
//! inference over stacked estimating equations, sensitivity analyses for violations of
//! principal ignorability and monotonicity, and a Monte Carlo harness.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod inference;
pub mod sensitivity;
pub mod simulation;
pub mod strata;

pub use error::{Error, ErrorClass, Result};

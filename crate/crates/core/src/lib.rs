//! Causal effect estimation for cluster randomized experiments whose
//! individuals are recruited after cluster randomization.
//!
//! The recruited sample is re-weighted by a working propensity score (the
//! probability of being in the treated arm among the recruited) to estimate
//! the effect on the recruited population, on the always-recruited stratum,
//! and on the incentivized-recruited stratum of the overall population.

// NaN-rejecting `!(x > 0.0)` checks and index loops over small fixed-size
// matrices are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acceptance;
pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod optim;
pub mod sensitivity;
pub mod simulate;
pub mod wps;

pub use error::{Error, Result};

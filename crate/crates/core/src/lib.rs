//! Bayesian filtering for stochastic differential equations with
//! moment-sequence state representations and moment-generated quadrature.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod error;
pub mod filter;
pub mod models;
pub mod momentspace;
pub mod quadrature;
pub mod transition;

pub use error::{Error, Result};

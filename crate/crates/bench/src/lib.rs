//! Experiment runner for the moment filter and its baselines.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod estimate;
pub mod experiment;
pub mod io;

use moment_filter::momentspace::{MomentSet, MomentSetJson};
use moment_filter::quadrature::{moment_quadrature_with, QuadratureOptions, QuadratureRule, Repair};

/// Quadrature rule of a moment set given as JSON.
pub fn rule_from_json(text: &str, repair: Repair) -> anyhow::Result<QuadratureRule> {
    let json: MomentSetJson = serde_json::from_str(text)?;
    let m = MomentSet::from_json(&json)?;
    let opts = QuadratureOptions {
        repair,
        ..Default::default()
    };
    Ok(moment_quadrature_with(&m, &opts)?)
}

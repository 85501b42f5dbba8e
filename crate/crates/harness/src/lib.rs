//! Experiment harness: configuration, data loading, the method × ensemble
//! size × run matrix and CSV/SVG reporting.

// Negated float comparisons are deliberate so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod experiment;
pub mod report;

pub use config::{ExperimentConfig, Profile};
pub use experiment::{run_experiment, Pipeline};

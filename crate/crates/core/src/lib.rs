//! Approximations to the Bayesian model average (BMA) of neural-network
//! classifiers: deep and cyclic ensembles, SGD-trajectory snapshots,
//! last-layer variational inference and coreset-accelerated last-layer
//! NUTS, with Brier score, accuracy and ECE evaluation.

// Negated float comparisons are used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod coresets;
pub mod ensembles;
pub mod error;
pub mod last_layer;
pub mod mcmc;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod vi;

pub use error::{BmaError, Result};

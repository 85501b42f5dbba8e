#![allow(dead_code)]

use std::path::Path;

use bma_core::ensembles::{EnsembleType, Method};
use bma_harness::{ExperimentConfig, Profile};

/// A matrix small enough to run in a few seconds.
pub fn tiny_config(out: &Path, methods: &[Method], m_max: usize, runs: usize) -> ExperimentConfig {
    let overrides = serde_json::json!({
        "dataset": {"kind": "synthetic", "classes": 3, "blobs": 1, "dim": 2, "pool": 200, "test": 100,
                    "radius": 2.0, "noise": 0.7},
        "architecture": {"kind": "mlp", "hidden": [8]},
        "methods": methods,
        "ensemble_types": ["deep"],
        "m_max": m_max,
        "runs": runs,
        "training": {"epochs": 4, "trajectory_decay_epochs": 3, "patience": 2, "k": 3, "batch_size": 32},
        "vi": {"steps": 200, "batch_size": 64, "samples": 4},
        "coreset": {"projection_dim": 64, "n_star": 30},
        "mcmc": {"warmup": 100, "n_draws": 20, "thin": 2},
        "out_dir": out,
        "record_wall_time": false,
    });
    ExperimentConfig::from_json(Profile::Desk, &overrides.to_string()).unwrap()
}

pub fn with_types(mut cfg: ExperimentConfig, types: &[EnsembleType]) -> ExperimentConfig {
    cfg.ensemble_types = types.to_vec();
    cfg
}

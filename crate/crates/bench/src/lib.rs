//! Shared fixtures for the benchmarks in `benches/`.

use std::path::PathBuf;

use fedlora_core::experiment::{self, ExperimentConfig, Prepared};

/// Loads a file from the workspace `configs/` directory.
pub fn load_config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Model, sites and validation set for `name` under `seed`.
pub fn prepared(name: &str, seed: u64) -> (ExperimentConfig, Prepared) {
    let config = load_config(name);
    let prepared = experiment::prepare(&config, seed).expect("prepare");
    (config, prepared)
}

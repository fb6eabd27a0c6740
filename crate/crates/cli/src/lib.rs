//! Experiment runner for the capmil models: dataset generation, multi-round
//! training, checkpoint evaluation, sweeps and the component ablation.
//! Every command is a pure function of its configuration and writes plain
//! CSV, JSONL and `key = value` files.

pub mod ablate;
pub mod config;
pub mod run;
pub mod stats;
pub mod sweep;

pub use config::ExperimentConfig;

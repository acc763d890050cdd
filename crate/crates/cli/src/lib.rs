//! Experiment runner: configs, grid sweeps, metrics and mask artifacts.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod metrics;
pub mod report;
pub mod runner;

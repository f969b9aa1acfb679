//! Experiment harness: configuration, synthetic datasets, algorithm runs and
//! the acceptance experiments.

pub mod config;
pub mod dataset;
pub mod draws;
pub mod error;
pub mod executor;
pub mod experiments;
pub mod runner;

//! Experiment front end for the federated training simulator: config
//! parsing, CSV ingestion, run orchestration, and report artifacts.

pub mod config;
pub mod csvio;
pub mod experiment;

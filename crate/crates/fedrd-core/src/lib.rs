//! Simulator and library for privacy-preserving federated training over
//! relational financial data.
//!
//! A transaction party and a set of bank parties jointly train a three-part
//! model (transaction / account / fusion). Embeddings and gradients that
//! cross party boundaries are protected by Gaussian local randomization or
//! Poisson Binomial quantization plus simulated secure aggregation. The
//! crate also ships a Renyi-DP budget estimator and a bit-exact
//! communication ledger.
//!
//! The crate is `no_std` (with `alloc`); file formats, configuration, and
//! the CLI live in the companion `fedrd-cli` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod accountant;
pub mod comms;
pub mod data;
pub mod fedrd;
pub mod mech;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod secagg;

mod math;

//! Adiabatic replay for class-incremental learning.
//!
//! A single scholar made of a diagonal-covariance Gaussian mixture trained by
//! SGD plus a bias-free linear read-out on its responsibilities. When a new
//! task arrives, the new samples query the mixture for similar known samples
//! and only that overlap is replayed, so unrelated components stay untouched.
//!
//! Module map:
//! - [`datasets`]: IDX ingestion and class-incremental task streams
//! - [`gmm`]: mixture parameters, likelihood, annealed SGD training, checkpoints
//! - [`sampler`]: query-driven top-S variant generation
//! - [`readout`]: linear classifier on responsibilities
//! - [`scholar`]: generator + solver with the adiabatic update loop
//! - [`protocol`]: full experiment driver and probes
//! - [`metrics`]: accuracy matrices, forgetting and backward transfer
//! - [`config`]: run configuration files

pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod pgm;
pub mod protocol;
pub mod readout;
pub mod real;
pub mod sampler;
pub mod scholar;

pub use error::{Error, Result};
pub use real::Real;

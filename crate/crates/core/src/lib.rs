//! Federated individual-treatment-effect (ITE) estimation with two-level
//! decorrelation of covariates and treatments.
//!
//! The engine simulates many hospital clients and one server in process.
//! Training runs in two federated stages: a personalized stage that learns a
//! propensity model with a per-client strategy scalar, and a generic stage
//! that learns a factual outcome model on inverse-probability-weighted data,
//! aggregated with hospital-specific weights. A synthetic data generator,
//! ablation baselines, a metric suite, and covariance diagnostics round out
//! the toolkit.

pub mod error;
pub mod numerics;

pub mod cohortweights;
pub mod datagen;
pub mod evaluation;
pub mod experiment;
pub mod factual;
pub mod federation;
pub mod propensity;

pub use error::{Error, Result};

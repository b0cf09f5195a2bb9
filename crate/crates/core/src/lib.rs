//! Similarity-informed transfer learning for censored quantile regression
//! with multiple functional predictors.
//!
//! The crate is organised around the estimation pipeline:
//!
//! * [`basis`]: B-spline bases and quadrature of functional inner products.
//! * [`cohort`]: censored cohorts, CSV ingestion and half splits.
//! * [`cqr`]: the sequential baseline estimator and the estimator exchange format.
//! * [`sitl`]: similarity weights, source aggregation and the debias step.
//! * [`resample`]: perturbation replicates and pointwise confidence bands.
//! * [`simlab`]: the simulation design and Monte Carlo driver.
//! * [`cli`]: the command-line front end.

pub mod basis;
pub mod cli;
pub mod cohort;
pub mod cqr;
pub mod error;
pub mod resample;
pub mod simlab;
pub mod sitl;
pub mod surface;

pub use error::{Error, Result};

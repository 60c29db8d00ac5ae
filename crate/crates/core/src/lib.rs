//! Bayesian pseudocoreset construction.
//!
//! Builds small synthetic datasets whose parameter posterior approximates the
//! full-data posterior by minimizing reverse KL, 2-Wasserstein, or forward KL
//! divergence against expert training trajectories, and evaluates them with
//! HMC / A-SGHMC sampling, calibration metrics, and a conjugate Gaussian model
//! whose posterior is known exactly.

pub mod diffcore;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod gaussapprox;
pub mod io;
pub mod models;
pub mod rng;
pub mod samplers;
pub mod synthetic;
pub mod trajectories;

pub use error::{Error, Result};

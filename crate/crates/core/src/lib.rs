//! Outlier-robust Kalman filtering.
//!
//! The iteratively saturated Kalman filter (ISKF) replaces the Kalman update
//! with a few iterations of a scaled gradient method on a Huberized MAP
//! objective. Each iteration saturates the whitened innovation and the
//! whitened correction to the predicted state, so both measurement and
//! process-noise outliers are attenuated. With steady-state gains the update
//! needs only matrix-vector products and triangular solves against cached
//! factors.
//!
//! Modules:
//! - [`model`]: LTI models, outlier mixtures, benchmark systems, PBH checks.
//! - [`satfun`]: circular Huber function and whitened saturation.
//! - [`riccati`]: covariance recursions, steady-state gains, scaling matrix.
//! - [`filters`]: KF and ISKF (time-varying and steady-state), objective,
//!   converged reference solver, missing measurements.
//! - [`sim`]: seeded trajectory simulation.
//! - [`tune`]: RMSE metrics and grid search.
//! - [`experiment`]: end-to-end experiment pipelines used by the CLI.
//! - [`io`]: CSV/JSON output and trajectory ingestion.

pub mod error;
pub mod experiment;
pub mod filters;
pub mod io;
pub mod matrix;
pub mod model;
pub mod riccati;
pub mod satfun;
pub mod sim;
pub mod tune;

pub use error::{IskfError, Result};
pub use filters::{FilterState, IskfParams};
pub use model::{build_model, cstr_model, validate_model, vehicle_model, OutlierSpec, SystemModel};
pub use riccati::{solve_steady, GainSet, ScalingMatrix};
pub use satfun::{phi, phi_grad, saturate, Threshold, Whitener};
pub use sim::{simulate, Trajectory};

//! Configuration-driven driver for the local volatility calibrator:
//! market generation, multiscale calibration, Monte Carlo audit and
//! convergence reporting.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod mc;
pub mod report;
pub mod surface;

pub use commands::Status;
pub use config::RunConfig;

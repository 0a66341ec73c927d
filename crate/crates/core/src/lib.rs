//! Discrete-time local-volatility calibration by multi-marginal entropic
//! optimal transport.
//!
//! The calibrated law is an exponential tilt of an Euler–Maruyama reference
//! chain. Its dual potentials are found by a block-coordinate Sinkhorn
//! iteration (optionally Anderson-accelerated) and refined over a ladder of
//! time grids.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceleration;
pub mod discretization;
pub mod error;
pub mod market;
pub mod multiscale;
pub mod operator;
pub mod solvers;
pub mod table;

pub use error::{CalibError, Result};

//! Dynamical-decoupling (DD) gradient descent on Gaussian mixture data.
//!
//! The crate has three layers:
//!
//! * [`mixture`], [`model`] and [`descent`] generate data and run plain
//!   gradient descent or the DD iteration at finite size.
//! * [`quadrature`] and [`state_evolution`] compute the deterministic
//!   high-dimensional limit of the DD iteration from a handful of overlaps.
//! * [`analysis`] and [`experiment`] turn trajectories into diagnostics,
//!   early-stopping decisions and reproducible experiment outputs.

// Index loops mirror the block recursions; negated comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod descent;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod linalg;
pub mod mixture;
pub mod model;
pub mod quadrature;
pub mod seeds;
pub mod state_evolution;

pub use error::{Error, Result};

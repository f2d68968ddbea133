//! Numerical verification toolkit for coupling-based gradient estimates of
//! nonlinear diffusion semigroups.
//!
//! The library simulates coupled diffusion pairs with a time-inhomogeneous
//! attraction schedule, reweights them by the Girsanov density of the
//! coupling drift, solves the associated semilinear backward equations by
//! least-squares regression, evaluates sublinear (uncertainty-set)
//! expectations by both control search and monotone finite differences, and
//! compares measured gradient quotients of the resulting semigroups against
//! closed-form Lipschitz bounds whose constants are derived from the model's
//! ellipticity and Lipschitz data.
//!
//! Layers, bottom up:
//!
//! * [`paths`] - counter-based RNG, deterministic time grids, and the
//!   block/tree execution scheme that makes every result independent of the
//!   worker count.
//! * [`model`] - problem specifications, derived constants, and the coupling
//!   schedule with its defining differential inequality.
//! * [`coupling`] - coupled Euler simulation, Girsanov weights, and the
//!   density/moment diagnostics.
//! * [`bsde`] - backward-equation regression solver for the semilinear
//!   semigroup.
//! * [`gexp`] - uncertainty-set semigroup by control search and by a
//!   monotone finite-difference scheme.
//! * [`harness`] - finite-separation gradient quotients, extrapolation, and
//!   the bound comparisons.
//! * [`cli`] - config-file driven experiment runner.

pub mod bsde;
pub mod cli;
pub mod coupling;
pub mod error;
pub mod gexp;
pub mod harness;
pub mod model;
pub mod paths;
pub mod report;

pub use error::{Error, Result};

//! Problem descriptors and every constant appearing in the gradient bounds.
//!
//! A [`ProblemSpec`] describes the diffusion
//!
//! ```text
//! dX_t = sigma(X_t) dB_t + b(X_t) dt,    X_0 = x,
//! ```
//!
//! together with a driver g(y, z) for the semilinear (backward-equation) mode,
//! a bounded terminal function phi, a horizon T, and optionally a volatility
//! uncertainty set Gamma (whose presence switches the toolkit into the
//! sublinear-expectation mode). All coefficient families are closed-form, so
//! every hypothesis constant — ellipticity bounds, Lipschitz constants, the
//! sup norm of phi — is exact by construction rather than estimated; black-box
//! user coefficients are deliberately not supported.
//!
//! [`DerivedConstants`] assembles the constants of the three gradient bounds,
//! [`CouplingSchedule`] the vanishing-at-T rate function xi_t that scales the
//! coupling drift, and [`builtin_specs`] a small catalogue of ready-made
//! specifications used throughout the test suite and the CLI.

mod builtin;
mod constants;
mod field;
mod schedule;

pub use builtin::{builtin_specs, get_builtin, BuiltinSpec};
pub use constants::{
    derive_constants, theorem_bound, BoundLine, ConstantConfig, ConstantsMode, DerivedConstants,
};
pub use field::{DriftField, DriverSpec, ProblemSpec, SigmaField, TerminalSpec, UncertaintySet};
pub use schedule::{
    check_schedule_inequality, CouplingSchedule, InequalityReport, InequalityRow, ScheduleMode,
};

//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by spec validation, simulation, solvers, and the runner.
#[derive(Debug, Error)]
pub enum Error {
    /// A problem specification violates a structural requirement
    /// (ellipticity, dimension mismatch, missing uncertainty set, ...).
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A numeric parameter is outside its documented domain.
    #[error("invalid parameter `{name}`: {message}")]
    InvalidParam {
        name: &'static str,
        message: String,
    },

    /// A step-size restriction (Picard contraction, CFL condition) is violated.
    #[error("step-size restriction violated: {0}")]
    StepSize(String),

    /// The regression basis became numerically degenerate.
    #[error("degraded regression basis: condition estimate {cond:.3e} exceeds {limit:.1e}")]
    DegradedBasis { cond: f64, limit: f64 },

    /// A simulated or solved quantity stopped being finite (or violated a
    /// hard a-priori bound it must satisfy).
    #[error("numerical blow-up at step {step} (t = {t}): {detail}")]
    Blowup { step: usize, t: f64, detail: String },

    /// The control-search evaluation budget ran out before the stopping rule fired.
    #[error("control search budget exhausted after {evaluations} evaluations (best value {best})")]
    BudgetExhausted { evaluations: usize, best: f64 },

    /// Configuration-file problems: unreadable, unparsable, or missing fields.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

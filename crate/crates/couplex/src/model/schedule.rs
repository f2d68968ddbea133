//! The coupling time-change schedule xi and its defining inequality.
//!
//! Both couplings use the same shape,
//!
//! ```text
//! xi_t = amp * (1 - e^{L (t - T)}) / L,       xi_T = 0,
//! ```
//!
//! (with the L -> 0 limit amp * (T - t)). The classical amplitude is
//! `amp = alpha/(alpha-1) * theta`; the uncertainty-set amplitude is
//! `amp = 2 (lambda_sigma^2/Lambda_sigma - theta)`. The schedule is chosen so
//! that for every exponent p in [1, alpha/2] and every t in [0, T),
//!
//! ```text
//! (2p-1)/p * L^g_p * xi_t - lambda_sigma^2/Lambda_sigma
//!     - (2p-1)/(2p) * xi'_t  <=  -theta,
//! ```
//!
//! with equality exactly at p = alpha/2 (classical) or at the defining theta
//! (uncertainty mode). `check_schedule_inequality` evaluates the left side on
//! a (p, t) grid and reports the worst margin, turning the construction into a
//! checkable certificate instead of trusting the algebra.
//!
//! The reciprocal integral int_a^b dt/xi_t, which drives both the coupling
//! kernel and the exponential-functional bound, has the closed form
//!
//! ```text
//! (1/amp) [ f(b) - f(a) ],    f(t) = L (t - T) - ln(1 - e^{L (t - T)}),
//! ```
//!
//! and (1/amp) ln((T-a)/(T-b)) when L = 0; it diverges as b -> T.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::constants::{ConstantsMode, DerivedConstants};

/// Which amplitude convention the schedule was built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Classical,
    GMode,
}

/// Deterministic schedule t -> (xi_t, xi'_t) on [0, T].
#[derive(Clone, Debug, Serialize)]
pub struct CouplingSchedule {
    pub mode: ScheduleMode,
    /// Classical exponent when applicable (fixes the binding p = alpha/2).
    pub alpha: Option<f64>,
    /// Level the inequality must reach.
    pub theta: f64,
    /// Rate L in the exponential shape.
    pub rate: f64,
    pub horizon: f64,
    /// Amplitude: xi_t = amp * (1 - e^{L(t-T)}) / L.
    pub amp: f64,
}

impl CouplingSchedule {
    /// Classical schedule from derived constants (main1 / corollary modes).
    pub fn classical(consts: &DerivedConstants) -> Result<Self> {
        let alpha = consts.alpha.ok_or_else(|| {
            Error::InvalidSpec("classical schedule needs classical-mode constants".into())
        })?;
        Ok(Self::classical_raw(
            alpha,
            consts.theta,
            consts.rate,
            consts.horizon,
        ))
    }

    /// Classical schedule directly from (alpha, theta, L, T).
    pub fn classical_raw(alpha: f64, theta: f64, rate: f64, horizon: f64) -> Self {
        Self {
            mode: ScheduleMode::Classical,
            alpha: Some(alpha),
            theta,
            rate,
            horizon,
            amp: alpha / (alpha - 1.0) * theta,
        }
    }

    /// Uncertainty-set schedule from derived constants (main2 mode).
    pub fn g_mode(consts: &DerivedConstants) -> Result<Self> {
        if consts.mode != ConstantsMode::Main2 {
            return Err(Error::InvalidSpec(
                "g-mode schedule needs uncertainty-mode constants".into(),
            ));
        }
        let theta_cap = consts.sigma_min * consts.sigma_min / consts.sigma_max;
        Ok(Self {
            mode: ScheduleMode::GMode,
            alpha: None,
            theta: consts.theta,
            rate: consts.rate,
            horizon: consts.horizon,
            amp: 2.0 * (theta_cap - consts.theta),
        })
    }

    /// Uncertainty-set schedule directly from (amp, theta, L, T).
    pub fn g_mode_raw(amp: f64, theta: f64, rate: f64, horizon: f64) -> Self {
        Self {
            mode: ScheduleMode::GMode,
            alpha: None,
            theta,
            rate,
            horizon,
            amp,
        }
    }

    /// (xi_t, xi'_t). Errors outside [0, T].
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::InvalidParam {
                name: "t",
                message: format!("schedule evaluated at {t} outside [0, {}]", self.horizon),
            });
        }
        let s = t - self.horizon;
        let xi = if self.rate == 0.0 {
            self.amp * (-s)
        } else {
            self.amp * (-(self.rate * s).exp_m1()) / self.rate
        };
        let dxi = -self.amp * (self.rate * s).exp();
        Ok((xi, dxi))
    }

    /// xi at t = 0.
    pub fn xi0(&self) -> f64 {
        self.eval(0.0).expect("0 is in the domain").0
    }

    /// Closed-form int_a^b dt / xi_t for 0 <= a <= b < T.
    pub fn integral_inv_xi(&self, a: f64, b: f64) -> Result<f64> {
        if !(0.0 <= a && a <= b && b < self.horizon) {
            return Err(Error::InvalidParam {
                name: "interval",
                message: format!(
                    "need 0 <= a <= b < T = {}, got [{a}, {b}]",
                    self.horizon
                ),
            });
        }
        if a == b {
            return Ok(0.0);
        }
        let value = if self.rate == 0.0 {
            ((self.horizon - a) / (self.horizon - b)).ln() / self.amp
        } else {
            let f = |t: f64| {
                let s = self.rate * (t - self.horizon);
                s - (-s.exp_m1()).ln()
            };
            (f(b) - f(a)) / self.amp
        };
        Ok(value)
    }

    /// Per-interval coupling weight 1 - exp(-int_a^b dt/xi).
    pub fn contraction_weight(&self, a: f64, b: f64) -> Result<f64> {
        Ok(-(-self.integral_inv_xi(a, b)?).exp_m1())
    }
}

/// Left side of the schedule inequality at one (p, t).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct InequalityRow {
    pub p: f64,
    pub t: f64,
    pub xi: f64,
    pub dxi: f64,
    /// Left side + theta; the inequality requires margin <= 0.
    pub margin: f64,
}

/// Grid evaluation of the schedule inequality.
#[derive(Clone, Debug, Serialize)]
pub struct InequalityReport {
    pub theta: f64,
    pub rows: Vec<InequalityRow>,
    pub max_margin: f64,
    pub worst_p: f64,
    pub worst_t: f64,
}

impl InequalityReport {
    /// True when no grid point exceeds theta by more than `tol`.
    pub fn pass(&self, tol: f64) -> bool {
        self.max_margin <= tol
    }
}

/// Evaluate the inequality on the product grid `p_grid` x `t_grid`.
///
/// For the classical schedule the drift coefficient is
/// `L^g_p = L_g L_sigma + L_b + (p - 1/2) L_sigma^2` from the constants; the
/// uncertainty schedule uses its fixed rate with the single exponent p = 1
/// semantics, so `p_grid` is only consulted in classical mode.
pub fn check_schedule_inequality(
    schedule: &CouplingSchedule,
    consts: &DerivedConstants,
    p_grid: &[f64],
    t_grid: &[f64],
) -> Result<InequalityReport> {
    let lam_ratio = consts.sigma_min * consts.sigma_min / consts.sigma_max;
    let mut rows = Vec::new();
    let mut max_margin = f64::NEG_INFINITY;
    let (mut worst_p, mut worst_t) = (f64::NAN, f64::NAN);

    let ps: Vec<f64> = match schedule.mode {
        ScheduleMode::Classical => {
            let alpha = schedule.alpha.expect("classical schedule carries alpha");
            let filtered: Vec<f64> = p_grid
                .iter()
                .copied()
                .filter(|&p| (1.0..=alpha / 2.0 + 1e-12).contains(&p))
                .collect();
            if filtered.is_empty() {
                return Err(Error::InvalidParam {
                    name: "p_grid",
                    message: format!("no exponents inside [1, {}]", alpha / 2.0),
                });
            }
            filtered
        }
        ScheduleMode::GMode => vec![1.0],
    };

    for &p in &ps {
        let coeff = match schedule.mode {
            ScheduleMode::Classical => {
                consts.lip_g_z * consts.lip_sigma
                    + consts.lip_b
                    + (p - 0.5) * consts.lip_sigma * consts.lip_sigma
            }
            // The uncertainty construction fixes the drift coefficient at L/2
            // independent of p.
            ScheduleMode::GMode => schedule.rate / 2.0,
        };
        for &t in t_grid {
            if !(0.0 <= t && t < schedule.horizon) {
                return Err(Error::InvalidParam {
                    name: "t_grid",
                    message: format!("t = {t} outside [0, T)"),
                });
            }
            let (xi, dxi) = schedule.eval(t)?;
            let lhs = (2.0 * p - 1.0) / p * coeff * xi - lam_ratio
                - (2.0 * p - 1.0) / (2.0 * p) * dxi;
            let margin = lhs + schedule.theta;
            if margin > max_margin {
                max_margin = margin;
                worst_p = p;
                worst_t = t;
            }
            rows.push(InequalityRow {
                p,
                t,
                xi,
                dxi,
                margin,
            });
        }
    }

    Ok(InequalityReport {
        theta: schedule.theta,
        rows,
        max_margin,
        worst_p,
        worst_t,
    })
}

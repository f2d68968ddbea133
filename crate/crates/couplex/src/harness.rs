//! Theorem-level verification: finite-separation gradient quotients of the
//! value function, extrapolated to zero separation and compared against the
//! closed-form bound recomputed from the derived constants.
//!
//! For a pair (x, y) at separation r = |x - y| the empirical quotient
//!
//! ```text
//! q(r) = |u(T, x) - u(T, y)| / r
//! ```
//!
//! is an observable surrogate for the gradient of u(T, .). A Lipschitz bound
//! of the form |u(T,x) - u(T,y)| <= F(|x-y|) with F(0) = 0 and F concave
//! implies the linearized form F'(0)|x - y|, so the quantity under test is
//! the r -> 0 limit of q. The harness samples q at dyadic separations
//! r_j = r0 2^{-j}, fits a weighted line q(r) = slope + c r, and reads the
//! intercept as the measured slope. Verification is one-sided,
//!
//! ```text
//! pass  iff  slope <= bound + 3 stderr(slope),
//! ```
//!
//! because the bound's constants are not claimed tight: a failure signals a
//! genuine violation beyond noise, never mere looseness.
//!
//! Three estimators feed the same report shape. Semilinear problems use the
//! backward regression solver at both endpoints of each pair under common
//! random numbers; driver-free problems use plain Monte Carlo, reached
//! through the very same entry point (the solver dispatches on a zero
//! driver), so the two verification modes share one code path by
//! construction. Volatility-uncertainty problems use either interpolated
//! monotone finite differences (d = 1; deterministic and tight) or the
//! control-supremum sampler (any dimension). A separate quadrature oracle
//! covers the constant-coefficient driver-free case, where u(T, .) is an
//! exact Gaussian smoothing and the slope can be measured with no Monte
//! Carlo noise at all.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{estimate_u_pair, SolverParams};
use crate::error::{Error, Result};
use crate::gexp::{
    evaluate_g_semigroup, solve_g_heat_fd, ControlFamily, FdParams, FdSolution, GMcParams,
};
use crate::model::{
    derive_constants, theorem_bound, ConstantConfig, ConstantsMode, DerivedConstants, DriftField,
    ProblemSpec, SigmaField,
};
use crate::paths::RngStream;
use crate::report::wls_line;

/// Default coarsest separation r0 of the dyadic ladder.
pub const DEFAULT_BASE_SEPARATION: f64 = 0.5;

/// Default number of dyadic levels (j = 0..DEFAULT_LEVELS).
pub const DEFAULT_LEVELS: usize = 5;

/// Weights for the intercept fit are floored here so that exact estimators
/// (a constant payoff has zero spread) keep the fit well defined.
const SE_FLOOR: f64 = 1e-12;

/// Step-halving error estimates of finite-difference quotients get this
/// additive floor so a pair where both grids agree to rounding still carries
/// a positive uncertainty.
const FD_SE_FLOOR: f64 = 1e-9;

/// Midpoints, directions, and separations defining the sampled pairs.
///
/// Pair (i, j) has endpoints x = base - (r_j/2) e_i and y = base + (r_j/2) e_i
/// for unit direction e_i, so every pair is centered on the same base point
/// and |x - y| = r_j exactly.
#[derive(Clone, Debug, Serialize)]
pub struct PairSet {
    /// Common midpoint of every pair.
    pub base: Vec<f64>,
    /// Unit directions: the coordinate axes first, then any random ones.
    pub directions: Vec<Vec<f64>>,
    /// Separations, coarsest first (dyadic r0 2^{-j}).
    pub separations: Vec<f64>,
}

impl PairSet {
    /// Coordinate axes plus `n_random` isotropic unit directions, with
    /// `levels` dyadic separations r0 2^{-j}. The extrapolation needs at
    /// least three levels.
    pub fn dyadic(
        base: Vec<f64>,
        n_random: usize,
        levels: usize,
        r0: f64,
        stream: RngStream,
    ) -> Result<Self> {
        let d = base.len();
        if d == 0 {
            return Err(Error::InvalidParam {
                name: "base",
                message: "the pair midpoint must have at least one coordinate".into(),
            });
        }
        if !base.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidParam {
                name: "base",
                message: "the pair midpoint must be finite".into(),
            });
        }
        if levels < 3 {
            return Err(Error::InvalidParam {
                name: "levels",
                message: format!("the slope extrapolation needs >= 3 separation levels, got {levels}"),
            });
        }
        if !(r0.is_finite() && r0 > 0.0) {
            return Err(Error::InvalidParam {
                name: "r0",
                message: format!("the base separation must be positive, got {r0}"),
            });
        }
        let mut directions = Vec::with_capacity(d + n_random);
        for axis in 0..d {
            let mut e = vec![0.0; d];
            e[axis] = 1.0;
            directions.push(e);
        }
        let mut draw = vec![0.0; d];
        for k in 0..n_random {
            stream.fill_normals(k as u64, 0, &mut draw);
            let norm = draw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::InvalidParam {
                    name: "n_random",
                    message: "degenerate random direction draw".into(),
                });
            }
            directions.push(draw.iter().map(|v| v / norm).collect());
        }
        let separations = (0..levels).map(|j| r0 * 0.5f64.powi(j as i32)).collect();
        Ok(PairSet {
            base,
            directions,
            separations,
        })
    }

    /// Total number of pairs (directions x separations).
    pub fn pair_count(&self) -> usize {
        self.directions.len() * self.separations.len()
    }

    /// Endpoints of the pair along direction `di` at separation `r`.
    fn endpoints(&self, di: usize, r: f64) -> (Vec<f64>, Vec<f64>) {
        let dir = &self.directions[di];
        let x = self
            .base
            .iter()
            .zip(dir)
            .map(|(c, e)| c - 0.5 * r * e)
            .collect();
        let y = self
            .base
            .iter()
            .zip(dir)
            .map(|(c, e)| c + 0.5 * r * e)
            .collect();
        (x, y)
    }
}

/// One pair's empirical quotient.
#[derive(Clone, Debug, Serialize)]
pub struct QuotientSample {
    pub pair_id: usize,
    /// Index into the pair set's direction list.
    pub direction: usize,
    /// Separation |x - y|.
    pub r: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u_x: f64,
    pub u_y: f64,
    /// |u_x - u_y| / r (non-negative by construction).
    pub quotient: f64,
    /// Standard error of the quotient (difference error / r).
    pub stderr: f64,
}

/// Extrapolated r -> 0 slope along one direction.
#[derive(Clone, Debug, Serialize)]
pub struct DirectionSlope {
    pub direction: usize,
    pub slope: f64,
    pub stderr: f64,
    /// Reduced chi-square of the line fit; values above one have already
    /// widened the stderr.
    pub fit_quality: f64,
}

/// Gradient-bound verification result for one specification.
#[derive(Clone, Debug, Serialize)]
pub struct GradientReport {
    pub spec_id: String,
    pub mode: ConstantsMode,
    /// Constants the bound was recomputed from at assembly time.
    pub constants: DerivedConstants,
    /// All sampled pairs, in pair order (direction-major, coarse to fine).
    pub samples: Vec<QuotientSample>,
    pub direction_slopes: Vec<DirectionSlope>,
    /// Largest extrapolated directional slope: the Lipschitz estimate.
    pub slope: f64,
    /// Standard error of that direction's intercept.
    pub slope_stderr: f64,
    /// Bound slope from the constants (never cached by callers).
    pub bound_slope: f64,
    /// bound + 3 stderr - slope; non-negative exactly when `pass`.
    pub margin: f64,
    pub pass: bool,
}

impl GradientReport {
    /// Flat CSV of the samples: `pair_id,r,quotient,stderr,bound_slope,pass`.
    /// The per-row pass is the pointwise check quotient <= bound + 3 stderr;
    /// the report-level pass compares the extrapolated slope instead.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,r,quotient,stderr,bound_slope,pass\r\n");
        for s in &self.samples {
            let row_pass = s.quotient <= self.bound_slope + 3.0 * s.stderr;
            out.push_str(&format!(
                "{},{},{},{},{},{}\r\n",
                s.pair_id, s.r, s.quotient, s.stderr, self.bound_slope, row_pass
            ));
        }
        out
    }
}

/// Weighted-line extrapolation of quotients to r = 0.
///
/// Fits q(r) = slope + c r with weights 1/stderr^2 and returns the intercept
/// and its standard error. Noisy, non-monotone quotient sequences do not
/// fail: a reduced chi-square above one widens the returned stderr instead.
/// Requires at least three separation levels. Zero stderrs (exact
/// estimators) are floored at a tiny positive weight scale.
pub fn extrapolate_slope(rs: &[f64], quotients: &[f64], stderrs: &[f64]) -> Result<(f64, f64)> {
    let (slope, stderr, _quality) = fit_intercept(rs, quotients, stderrs)?;
    Ok((slope, stderr))
}

fn fit_intercept(rs: &[f64], quotients: &[f64], stderrs: &[f64]) -> Result<(f64, f64, f64)> {
    let sigmas: Vec<f64> = stderrs.iter().map(|s| s.max(SE_FLOOR)).collect();
    let (intercept, _line_slope, intercept_se, quality) = wls_line(rs, quotients, &sigmas)?;
    Ok((intercept, intercept_se, quality))
}

/// Evaluate every pair of `pairs` through `eval`, in parallel across pairs
/// when `workers > 1`, and return the samples in pair order regardless of
/// scheduling. `eval` maps endpoints (x, y) to
/// (u_x, u_y, difference, difference stderr).
fn eval_pairs<F>(pairs: &PairSet, workers: usize, eval: F) -> Result<Vec<QuotientSample>>
where
    F: Fn(&[f64], &[f64]) -> Result<(f64, f64, f64, f64)> + Sync,
{
    let mut tasks = Vec::with_capacity(pairs.pair_count());
    for di in 0..pairs.directions.len() {
        for &r in &pairs.separations {
            tasks.push((tasks.len(), di, r));
        }
    }
    let run = |&(pair_id, di, r): &(usize, usize, f64)| -> Result<QuotientSample> {
        let (x, y) = pairs.endpoints(di, r);
        let (u_x, u_y, diff, diff_se) = eval(&x, &y)?;
        Ok(QuotientSample {
            pair_id,
            direction: di,
            r,
            x,
            y,
            u_x,
            u_y,
            quotient: diff.abs() / r,
            stderr: diff_se / r,
        })
    };
    if workers <= 1 {
        tasks.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("failed to build worker pool");
        pool.install(|| tasks.par_iter().map(run).collect())
    }
}

/// Extrapolate per direction, take the largest directional slope as the
/// Lipschitz estimate, and compare against the bound recomputed from
/// `constants` here and now (reports never carry a cached bound).
fn assemble_report(
    spec_id: &str,
    mode: ConstantsMode,
    constants: DerivedConstants,
    samples: Vec<QuotientSample>,
    n_directions: usize,
) -> Result<GradientReport> {
    let bound_slope = theorem_bound(&constants).slope;
    let mut direction_slopes = Vec::with_capacity(n_directions);
    for di in 0..n_directions {
        let mut rs = Vec::new();
        let mut qs = Vec::new();
        let mut ses = Vec::new();
        for s in samples.iter().filter(|s| s.direction == di) {
            rs.push(s.r);
            qs.push(s.quotient);
            ses.push(s.stderr);
        }
        let (slope, stderr, fit_quality) = fit_intercept(&rs, &qs, &ses)?;
        direction_slopes.push(DirectionSlope {
            direction: di,
            slope,
            stderr,
            fit_quality,
        });
    }
    let worst = direction_slopes
        .iter()
        .max_by(|a, b| a.slope.total_cmp(&b.slope))
        .expect("a pair set has at least one direction");
    let slope = worst.slope;
    let slope_stderr = worst.stderr;
    let margin = bound_slope + 3.0 * slope_stderr - slope;
    Ok(GradientReport {
        spec_id: spec_id.to_string(),
        mode,
        constants,
        samples,
        direction_slopes,
        slope,
        slope_stderr,
        bound_slope,
        margin,
        pass: margin >= 0.0,
    })
}

/// Verify the semilinear gradient bound: u is estimated by the backward
/// regression solver at both endpoints of each pair under common random
/// numbers, quotients are extrapolated to r -> 0 per direction, and the
/// largest directional slope is checked against the bound.
///
/// Pairs are evaluated in parallel across `workers`; the path loops inside
/// each estimate run single-threaded, so the samples (and hence the report)
/// are identical for every worker count.
pub fn verify_main1(
    spec: &ProblemSpec,
    spec_id: &str,
    pairs: &PairSet,
    solver: &SolverParams,
    config: &ConstantConfig,
    stream: RngStream,
    workers: usize,
) -> Result<GradientReport> {
    let constants = derive_constants(spec, ConstantsMode::Main1, config)?;
    let samples = eval_pairs(pairs, workers, |x, y| {
        let est = estimate_u_pair(spec, stream, x, y, solver, 1)?;
        Ok((est.at_x.value, est.at_y.value, est.diff_mean, est.diff_stderr))
    })?;
    assemble_report(
        spec_id,
        ConstantsMode::Main1,
        constants,
        samples,
        pairs.directions.len(),
    )
}

/// Verify the driver-free gradient bound. The estimator entry point is the
/// same as in [`verify_main1`]; with a zero driver it dispatches to plain
/// Monte Carlo of the terminal payoff (no regression), so of `mc` only
/// `n_paths`, `n_steps`, and `n_replications` matter here.
pub fn verify_corollary(
    spec: &ProblemSpec,
    spec_id: &str,
    pairs: &PairSet,
    mc: &SolverParams,
    config: &ConstantConfig,
    stream: RngStream,
    workers: usize,
) -> Result<GradientReport> {
    let constants = derive_constants(spec, ConstantsMode::Corollary, config)?;
    let samples = eval_pairs(pairs, workers, |x, y| {
        let est = estimate_u_pair(spec, stream, x, y, mc, 1)?;
        Ok((est.at_x.value, est.at_y.value, est.diff_mean, est.diff_stderr))
    })?;
    assemble_report(
        spec_id,
        ConstantsMode::Corollary,
        constants,
        samples,
        pairs.directions.len(),
    )
}

/// How [`verify_main2`] estimates the sublinear-expectation value function.
pub enum Main2Estimator<'a> {
    /// One-dimensional only: interpolate one monotone finite-difference
    /// solve, with a second solve at doubled spacing providing a
    /// step-halving error estimate of each pair's difference. Deterministic
    /// and much tighter than sampling.
    FiniteDifference(&'a FdParams),
    /// Any dimension: control-supremum Monte Carlo at the two endpoints on a
    /// shared stream. The quotient stderr adds the endpoint errors — a
    /// supremum of means admits no common-random-number cancellation claim —
    /// so this route is the looser one.
    ControlSup {
        family: &'a ControlFamily,
        params: &'a GMcParams,
        stream: RngStream,
    },
}

/// Verify the volatility-uncertainty gradient bound with the chosen
/// estimator. Finite differences require d = 1; the domain of the grid must
/// contain every pair endpoint.
pub fn verify_main2(
    spec: &ProblemSpec,
    spec_id: &str,
    pairs: &PairSet,
    estimator: &Main2Estimator<'_>,
    config: &ConstantConfig,
    workers: usize,
) -> Result<GradientReport> {
    let constants = derive_constants(spec, ConstantsMode::Main2, config)?;
    let samples = match estimator {
        Main2Estimator::FiniteDifference(fd) => {
            if spec.d != 1 {
                return Err(Error::InvalidSpec(format!(
                    "the finite-difference gradient estimator is one-dimensional, spec has d = {}",
                    spec.d
                )));
            }
            let x0 = pairs.base[0];
            let fine = solve_g_heat_fd(spec, fd, x0)?;
            let coarse_params = FdParams {
                dx: 2.0 * fd.dx,
                n_steps: None,
                ..**fd
            };
            let coarse = solve_g_heat_fd(spec, &coarse_params, x0)?;
            // Interpolation per pair is trivially cheap; no fan-out needed.
            eval_pairs(pairs, 1, |x, y| fd_pair(&fine, &coarse, x[0], y[0]))?
        }
        Main2Estimator::ControlSup {
            family,
            params,
            stream,
        } => eval_pairs(pairs, workers, |x, y| {
            let at_x = evaluate_g_semigroup(spec, x, family, params, *stream, 1)?;
            let at_y = evaluate_g_semigroup(spec, y, family, params, *stream, 1)?;
            Ok((
                at_x.value,
                at_y.value,
                at_x.value - at_y.value,
                at_x.stderr + at_y.stderr,
            ))
        })?,
    };
    assemble_report(
        spec_id,
        ConstantsMode::Main2,
        constants,
        samples,
        pairs.directions.len(),
    )
}

/// Difference of interpolated grid values, with a step-halving (Richardson)
/// envelope of the difference itself as its error estimate. Taking the
/// envelope of the difference rather than of the two values keeps the error
/// honest where discretization bias cancels between nearby points.
fn fd_pair(fine: &FdSolution, coarse: &FdSolution, x: f64, y: f64) -> Result<(f64, f64, f64, f64)> {
    let u_x = fine.value_at(x)?;
    let u_y = fine.value_at(y)?;
    let diff = u_x - u_y;
    let coarse_diff = coarse.value_at(x)? - coarse.value_at(y)?;
    let err = (diff - coarse_diff).abs() / (std::f64::consts::SQRT_2 - 1.0) + FD_SE_FLOOR;
    Ok((u_x, u_y, diff, err))
}

/// Noise-free driver-free check for constant sigma and zero drift, where
/// the value function is an exact Gaussian smoothing,
///
/// ```text
/// u(T, x) = E[phi(x + sigma sqrt(T) Z)],    Z ~ N(0, 1),
/// ```
///
/// evaluated by trapezoid quadrature over z in [-8, 8] (the truncated tail
/// mass is below 1e-15, and the integrand's Gaussian decay makes the
/// trapezoid rule converge faster than any power of the node count).
#[derive(Clone, Debug, Serialize)]
pub struct QuadratureReport {
    pub spec_id: String,
    pub constants: DerivedConstants,
    /// max over the scan grid of |du(T, x)/dx| by central differences.
    pub slope: f64,
    /// Scan abscissa attaining the max.
    pub at_x: f64,
    pub bound_slope: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Measure the exact Lipschitz slope of u(T, .) on `[x_lo, x_hi]` with
/// `n_scan` central-difference nodes and compare it against the driver-free
/// bound. Requires d = 1, constant sigma, zero drift, zero driver, and no
/// uncertainty set; with those coefficients the bound's rate vanishes and
/// the comparison line is exactly C ||phi|| / sqrt(T).
pub fn corollary_quadrature_check(
    spec: &ProblemSpec,
    spec_id: &str,
    config: &ConstantConfig,
    x_lo: f64,
    x_hi: f64,
    n_scan: usize,
) -> Result<QuadratureReport> {
    spec.validate()?;
    let sigma = match (&spec.sigma, &spec.b, &spec.driver, spec.d, &spec.gamma) {
        (SigmaField::Constant { value }, DriftField::Zero, driver, 1, None)
            if driver.is_zero() =>
        {
            *value
        }
        _ => {
            return Err(Error::InvalidSpec(
                "the quadrature oracle needs d = 1, constant sigma, zero drift, zero driver, \
                 and no uncertainty set"
                    .into(),
            ))
        }
    };
    if n_scan < 3 {
        return Err(Error::InvalidParam {
            name: "n_scan",
            message: format!("central differences need >= 3 scan nodes, got {n_scan}"),
        });
    }
    if x_hi <= x_lo || x_hi.is_nan() || x_lo.is_nan() {
        return Err(Error::InvalidParam {
            name: "x_hi",
            message: format!("scan interval [{x_lo}, {x_hi}] is empty"),
        });
    }
    let constants = derive_constants(spec, ConstantsMode::Corollary, config)?;
    let bound_slope = theorem_bound(&constants).slope;

    const Z_CUT: f64 = 8.0;
    const N_QUAD: usize = 4001;
    let dz = 2.0 * Z_CUT / (N_QUAD - 1) as f64;
    let scale = sigma * spec.horizon.sqrt();
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let u_at = |x: f64| -> f64 {
        let mut acc = 0.0;
        for k in 0..N_QUAD {
            let z = -Z_CUT + k as f64 * dz;
            let weight = if k == 0 || k == N_QUAD - 1 { 0.5 } else { 1.0 };
            let density = norm * (-0.5 * z * z).exp();
            acc += weight * spec.terminal.eval(&[x + scale * z]) * density;
        }
        acc * dz
    };

    let h = (x_hi - x_lo) / (n_scan - 1) as f64;
    let us: Vec<f64> = (0..n_scan).map(|i| u_at(x_lo + i as f64 * h)).collect();
    let mut slope = 0.0;
    let mut at_x = x_lo;
    for i in 1..n_scan - 1 {
        let derivative = ((us[i + 1] - us[i - 1]) / (2.0 * h)).abs();
        if derivative > slope {
            slope = derivative;
            at_x = x_lo + i as f64 * h;
        }
    }
    let margin = bound_slope - slope;
    Ok(QuadratureReport {
        spec_id: spec_id.to_string(),
        constants,
        slope,
        at_x,
        bound_slope,
        margin,
        pass: margin >= 0.0,
    })
}

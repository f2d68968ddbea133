//! Least-squares regression Monte Carlo for the backward pair (Y, Z).
//!
//! The semilinear value u(T, x) = Y_0 of
//!
//! ```text
//! Y_t = phi(X_T) + int_t^T g(Y_s, Z_s) ds - int_t^T Z_s dB_s
//! ```
//!
//! is computed by backward induction on a uniform grid with conditional
//! expectations replaced by global polynomial least squares on the simulated
//! forward cloud (Gobet-Lemor-Warin):
//!
//! ```text
//! Z_k = E[Y_{k+1} dB_k | X_k] / dt_k,
//! Y_k = E[Y_{k+1} | X_k] + g(Y_k, Z_k) dt_k,
//! ```
//!
//! the implicit Y-equation solved by a short Picard iteration (a contraction
//! whenever `K_g dt < 1`, which is enforced). At the initial node all paths
//! coincide, so the conditional expectations are plain means.
//!
//! The basis at each node is the standardized polynomial family of total
//! degree `basis_degree`; the constant function is always present, so every
//! regression preserves the cross-sectional sample mean exactly - plain Monte
//! Carlo means are embedded in the scheme, not approximated by it.
//!
//! Fitted values are truncated at [`TRUNCATION_HEADROOM`] times the Gronwall
//! level `e^{K_g (T-t)} |phi|_inf + |g(0,0)| (e^{K_g (T-t)} - 1)/K_g`. The
//! true solution satisfies the level itself (the linear z-sensitivity is
//! absorbed by a bounded change of measure); the headroom keeps the clamp
//! from biting ordinary fit error - which is mean-canceling and must not be
//! cut asymmetrically - while still stopping polynomial blow-up at the edges
//! of the cloud.
//!
//! Parallelism: path generation and per-path updates are embarrassingly
//! parallel (pure per-path writes); every cross-path sum (normal equations,
//! residuals, means) goes through the fixed block tree of [`map_reduce_blocks`],
//! so results are bit-identical for any worker count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::paths::{map_reduce_blocks, RngStream, TimeGrid};
use crate::report::MomentReport;

/// Condition-number ceiling for the regression normal matrix.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Multiple of the Gronwall a-priori level at which fitted values are
/// truncated (the solver tolerance of the sup-norm guarantee).
pub const TRUNCATION_HEADROOM: f64 = 3.0;

/// Tunable solver parameters (the experiment-config `solver` block).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    pub n_paths: u64,
    pub n_steps: usize,
    pub basis_degree: usize,
    #[serde(default = "default_picard")]
    pub picard_iters: usize,
    /// Independent replications used for the stderr of point estimates.
    #[serde(default = "default_replications")]
    pub n_replications: usize,
}

fn default_picard() -> usize {
    3
}

fn default_replications() -> usize {
    8
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            n_paths: 16_384,
            n_steps: 50,
            basis_degree: 3,
            picard_iters: 3,
            n_replications: 8,
        }
    }
}

/// Regression output at one interior node.
#[derive(Clone, Debug)]
pub struct NodeFit {
    pub node: usize,
    /// Per-coordinate standardization shift (cross-sectional mean).
    pub shift: Vec<f64>,
    /// Per-coordinate standardization scale (cross-sectional stddev).
    pub scale: Vec<f64>,
    /// Coefficients of the conditional-mean fit of Y_{k+1}.
    pub value_coefficients: Vec<f64>,
    /// Coefficients of the Z-fit, one row per Brownian coordinate (already
    /// divided by dt_k).
    pub z_coefficients: Vec<Vec<f64>>,
    /// Condition estimate of the normal matrix.
    pub condition: f64,
}

/// Solver health indicators.
#[derive(Clone, Debug, Serialize)]
pub struct BsdeDiagnostics {
    /// Largest normal-matrix condition estimate over all regression nodes.
    pub max_condition: f64,
    /// Root-mean-square one-step projection defect
    /// `Y_{k+1} - E[Y_{k+1}|X_k] - Z_k dB_k` over all steps and paths.
    pub martingale_residual: f64,
    /// Empirical mean of sup_t e^{mu t} |Y_t| along solved paths.
    pub mean_sup_y: f64,
    /// Empirical mean of (int_0^T e^{2 mu s} |Z_s|^2 ds)^{1/2}.
    pub mean_z_energy: f64,
    /// Largest |Y_k| over all nodes and paths.
    pub max_abs_y: f64,
}

/// Backward solve result: the value y0 = u(T, x0), the initial control z0,
/// and the per-node regression fits.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub basis_degree: usize,
    pub y0: f64,
    pub z0: Vec<f64>,
    /// Fits at nodes 1..n_steps-1 in node order.
    pub fits: Vec<NodeFit>,
    pub diagnostics: BsdeDiagnostics,
}

/// Point estimate with a replication stderr.
#[derive(Clone, Debug, Serialize)]
pub struct UEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Per-replication estimates (independent path blocks).
    pub replicates: Vec<f64>,
}

/// Common-random-number estimate of u at two points and their difference.
#[derive(Clone, Debug, Serialize)]
pub struct PairEstimate {
    pub at_x: UEstimate,
    pub at_y: UEstimate,
    pub diff_mean: f64,
    pub diff_stderr: f64,
}

/// A-priori bound comparison for a set of independent solutions.
#[derive(Clone, Debug, Serialize)]
pub struct AprioriReport {
    pub mu: f64,
    pub sup_y: MomentReport,
    pub z_energy: MomentReport,
    pub bound: f64,
    pub pass: bool,
}

/// Monomial basis of total degree <= `degree` on standardized coordinates,
/// graded-lexicographic order (the constant comes first).
struct PolyBasis {
    d: usize,
    degree: usize,
    exponents: Vec<Vec<u32>>,
}

impl PolyBasis {
    fn new(d: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        let mut current = vec![0u32; d];
        for total in 0..=degree as u32 {
            enumerate_exponents(d, 0, total, &mut current, &mut exponents);
        }
        Self {
            d,
            degree,
            exponents,
        }
    }

    fn len(&self) -> usize {
        self.exponents.len()
    }

    /// Evaluate all basis functions at the standardized point.
    /// `powers` is scratch of size d * (degree + 1).
    fn eval_into(&self, xhat: &[f64], powers: &mut [f64], out: &mut [f64]) {
        let cols = self.degree + 1;
        for i in 0..self.d {
            powers[i * cols] = 1.0;
            for e in 1..cols {
                powers[i * cols + e] = powers[i * cols + e - 1] * xhat[i];
            }
        }
        for (j, exps) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for i in 0..self.d {
                v *= powers[i * cols + exps[i] as usize];
            }
            out[j] = v;
        }
    }
}

fn enumerate_exponents(
    d: usize,
    coord: usize,
    remaining: u32,
    current: &mut Vec<u32>,
    out: &mut Vec<Vec<u32>>,
) {
    if coord == d - 1 {
        current[coord] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[coord] = e;
        enumerate_exponents(d, coord + 1, remaining - e, current, out);
    }
}

fn first_error<T>(results: Vec<std::result::Result<T, Error>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

fn build_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("failed to build worker pool")
}

/// Per-path backward state.
#[derive(Clone, Copy)]
struct PathState {
    y: f64,
    sup_y: f64,
    z_energy: f64,
}

fn validate_solver_inputs(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: u64,
    basis_degree: usize,
    picard_iters: usize,
) -> Result<()> {
    if spec.is_g_mode() {
        return Err(Error::InvalidSpec(
            "the backward solver handles classical specs only".into(),
        ));
    }
    if x0.len() != spec.d {
        return Err(Error::InvalidParam {
            name: "x0",
            message: format!("length {} does not match spec dimension {}", x0.len(), spec.d),
        });
    }
    if n_paths < 1000 {
        return Err(Error::InvalidParam {
            name: "n_paths",
            message: format!("regression needs at least 1000 paths, got {n_paths}"),
        });
    }
    if basis_degree == 0 || basis_degree > 8 {
        return Err(Error::InvalidParam {
            name: "basis_degree",
            message: format!("degree must lie in 1..=8, got {basis_degree}"),
        });
    }
    if picard_iters == 0 || picard_iters > 16 {
        return Err(Error::InvalidParam {
            name: "picard_iters",
            message: format!("iterations must lie in 1..=16, got {picard_iters}"),
        });
    }
    let k_g = spec.driver.lip_y();
    if k_g > 0.0 && grid.max_dt() * k_g >= 1.0 {
        return Err(Error::StepSize(format!(
            "dt = {} must stay below 1/K_g = {} for the Picard contraction",
            grid.max_dt(),
            1.0 / k_g
        )));
    }
    Ok(())
}

/// Backward regression solve of the (Y, Z) pair along a simulated forward
/// cloud started at `x0`. Paths use indices `path_offset..path_offset+n_paths`
/// of `stream`, so disjoint offsets give independent replications and equal
/// offsets give common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn solve_bsde(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    stream: RngStream,
    x0: &[f64],
    n_paths: u64,
    basis_degree: usize,
    picard_iters: usize,
    path_offset: u64,
    workers: usize,
) -> Result<BsdeSolution> {
    validate_solver_inputs(spec, grid, x0, n_paths, basis_degree, picard_iters)?;
    let d = spec.d;
    let n_nodes = grid.len();
    let n_steps = grid.n_steps();
    let n = n_paths as usize;
    let row = n_nodes * d;
    let basis = PolyBasis::new(d, basis_degree);
    let p = basis.len();
    let mu = spec.driver.lip_y() + 4.0 * spec.driver.lip_z() * spec.driver.lip_z();
    let pool = build_pool(workers);

    // Forward cloud, path-major.
    let mut paths = vec![0.0f64; n * row];
    {
        let gen = |q: usize, out: &mut [f64]| -> Result<()> {
            let path = path_offset + q as u64;
            out[..d].copy_from_slice(x0);
            let mut sx = vec![0.0; d];
            let mut bx = vec![0.0; d];
            let mut dw = vec![0.0; d];
            for (k, _t, dt) in grid.steps() {
                let (done, rest) = out.split_at_mut((k + 1) * d);
                let x = &done[k * d..];
                spec.sigma.eval_into(x, &mut sx);
                spec.b.eval_into(x, &mut bx);
                stream.fill_increments(path, k as u32, dt.sqrt(), &mut dw);
                for i in 0..d {
                    rest[i] = x[i] + bx[i] * dt + sx[i] * dw[i];
                    if !rest[i].is_finite() {
                        return Err(Error::Blowup {
                            step: k,
                            t: grid.node(k + 1),
                            detail: "forward state became non-finite".into(),
                        });
                    }
                }
            }
            Ok(())
        };
        let results: Vec<Result<()>> = if workers <= 1 {
            paths
                .chunks_mut(row)
                .enumerate()
                .map(|(q, out)| gen(q, out))
                .collect()
        } else {
            pool.install(|| {
                paths
                    .par_chunks_mut(row)
                    .enumerate()
                    .map(|(q, out)| gen(q, out))
                    .collect()
            })
        };
        first_error(results)?;
    }
    let paths = &paths[..];

    // Cross-sectional standardization statistics for every node.
    let stats = map_reduce_blocks(
        n_paths,
        workers,
        |range| {
            let mut sums = vec![0.0f64; 2 * row];
            for q in range {
                let base = q as usize * row;
                for j in 0..row {
                    let v = paths[base + j];
                    sums[j] += v;
                    sums[row + j] += v * v;
                }
            }
            sums
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                *x += *y;
            }
            a
        },
    )
    .expect("n_paths > 0");
    let node_shift: Vec<f64> = (0..row).map(|j| stats[j] / n as f64).collect();
    let node_scale: Vec<f64> = (0..row)
        .map(|j| {
            let var = (stats[row + j] / n as f64 - node_shift[j] * node_shift[j]).max(0.0);
            var.sqrt()
        })
        .collect();

    // Terminal condition.
    let mut state = vec![
        PathState {
            y: 0.0,
            sup_y: 0.0,
            z_energy: 0.0,
        };
        n
    ];
    let horizon = grid.t_end();
    let term = |q: usize, s: &mut PathState| {
        let x = &paths[q * row + n_steps * d..q * row + n_steps * d + d];
        let y = spec.terminal.eval(x);
        s.y = y;
        s.sup_y = (mu * horizon).exp() * y.abs();
        s.z_energy = 0.0;
    };
    if workers <= 1 {
        state.iter_mut().enumerate().for_each(|(q, s)| term(q, s));
    } else {
        pool.install(|| state.par_iter_mut().enumerate().for_each(|(q, s)| term(q, s)));
    }

    let picard = |c: f64, z: &[f64], dt: f64| -> f64 {
        if spec.driver.is_zero() {
            return c;
        }
        let mut y = c;
        for _ in 0..picard_iters {
            y = c + spec.driver.eval(y, z) * dt;
        }
        y
    };
    // Gronwall truncation level for the fitted values at time t.
    let k_g0 = spec.driver.lip_y();
    let g0_abs = spec.driver.g0().abs();
    let phi_sup = spec.terminal.sup_norm();
    let level = |t: f64| -> f64 {
        let tau = horizon - t;
        let base = if k_g0 > 0.0 {
            (k_g0 * tau).exp() * phi_sup + g0_abs * ((k_g0 * tau).exp() - 1.0) / k_g0
        } else {
            phi_sup + g0_abs * tau
        };
        TRUNCATION_HEADROOM * base
    };

    let mut fits: Vec<NodeFit> = Vec::with_capacity(n_steps.saturating_sub(1));
    let mut max_condition = 1.0f64;
    let mut defect_sum = 0.0f64;
    let mut max_abs_y = map_reduce_blocks(
        n_paths,
        workers,
        |range| {
            range.fold(0.0f64, |m, q| m.max(state[q as usize].y.abs()))
        },
        f64::max,
    )
    .expect("n_paths > 0");

    for k in (1..n_steps).rev() {
        let t_k = grid.node(k);
        let dt = grid.node(k + 1) - t_k;
        let shift = &node_shift[k * d..(k + 1) * d];
        let scale: Vec<f64> = node_scale[k * d..(k + 1) * d]
            .iter()
            .map(|&s| if s > 0.0 { s } else { 1.0 })
            .collect();

        // Normal equations: gram = sum psi psi^T, rhs rows = [Y, Y dB_1, ...].
        let acc = map_reduce_blocks(
            n_paths,
            workers,
            |range| {
                let mut gram = vec![0.0f64; p * p];
                let mut rhs = vec![0.0f64; (1 + d) * p];
                let mut xhat = vec![0.0f64; d];
                let mut powers = vec![0.0f64; d * (basis.degree + 1)];
                let mut psi = vec![0.0f64; p];
                let mut dw = vec![0.0f64; d];
                for q in range {
                    let qi = q as usize;
                    let x = &paths[qi * row + k * d..qi * row + (k + 1) * d];
                    for i in 0..d {
                        xhat[i] = (x[i] - shift[i]) / scale[i];
                    }
                    basis.eval_into(&xhat, &mut powers, &mut psi);
                    stream.fill_increments(path_offset + q, k as u32, dt.sqrt(), &mut dw);
                    let y_next = state[qi].y;
                    for a in 0..p {
                        let pa = psi[a];
                        for b in 0..p {
                            gram[a * p + b] += pa * psi[b];
                        }
                        rhs[a] += pa * y_next;
                        for i in 0..d {
                            rhs[(1 + i) * p + a] += pa * y_next * dw[i];
                        }
                    }
                }
                (gram, rhs)
            },
            |(mut g1, mut r1), (g2, r2)| {
                for (a, b) in g1.iter_mut().zip(&g2) {
                    *a += *b;
                }
                for (a, b) in r1.iter_mut().zip(&r2) {
                    *a += *b;
                }
                (g1, r1)
            },
        )
        .expect("n_paths > 0");

        let gram = DMatrix::from_fn(p, p, |a, b| acc.0[a * p + b] / n as f64);
        let eig = gram.clone().symmetric_eigen();
        let mut emin = f64::INFINITY;
        let mut emax = f64::NEG_INFINITY;
        for &e in eig.eigenvalues.iter() {
            emin = emin.min(e);
            emax = emax.max(e);
        }
        let condition = if emin <= 0.0 { f64::INFINITY } else { emax / emin };
        if condition > CONDITION_LIMIT {
            return Err(Error::DegradedBasis {
                cond: condition,
                limit: CONDITION_LIMIT,
            });
        }
        max_condition = max_condition.max(condition);
        let chol = gram.cholesky().ok_or(Error::DegradedBasis {
            cond: condition,
            limit: CONDITION_LIMIT,
        })?;
        let solve_rhs = |offset: usize| -> Vec<f64> {
            let v = DVector::from_fn(p, |a, _| acc.1[offset * p + a] / n as f64);
            chol.solve(&v).iter().copied().collect()
        };
        let beta_y = solve_rhs(0);
        let beta_z: Vec<Vec<f64>> = (0..d)
            .map(|i| solve_rhs(1 + i).iter().map(|c| c / dt).collect())
            .collect();

        // Projection defect of this step, measured before the state moves.
        let step_defect = map_reduce_blocks(
            n_paths,
            workers,
            |range| {
                let mut sum = 0.0f64;
                let mut xhat = vec![0.0f64; d];
                let mut powers = vec![0.0f64; d * (basis.degree + 1)];
                let mut psi = vec![0.0f64; p];
                let mut dw = vec![0.0f64; d];
                for q in range {
                    let qi = q as usize;
                    let x = &paths[qi * row + k * d..qi * row + (k + 1) * d];
                    for i in 0..d {
                        xhat[i] = (x[i] - shift[i]) / scale[i];
                    }
                    basis.eval_into(&xhat, &mut powers, &mut psi);
                    stream.fill_increments(path_offset + q, k as u32, dt.sqrt(), &mut dw);
                    let c: f64 = psi.iter().zip(&beta_y).map(|(a, b)| a * b).sum();
                    let mut martingale = 0.0;
                    for i in 0..d {
                        let z: f64 = psi.iter().zip(&beta_z[i]).map(|(a, b)| a * b).sum();
                        martingale += z * dw[i];
                    }
                    let defect = state[qi].y - c - martingale;
                    sum += defect * defect;
                }
                sum
            },
            |a, b| a + b,
        )
        .expect("n_paths > 0");
        defect_sum += step_defect;

        // Move every path to Y_k and update the pathwise statistics.
        let growth = (mu * t_k).exp();
        let growth2 = (2.0 * mu * t_k).exp();
        let lvl = level(t_k);
        let update = |q: usize, s: &mut PathState| {
            let mut xhat = vec![0.0f64; d];
            let mut powers = vec![0.0f64; d * (basis.degree + 1)];
            let mut psi = vec![0.0f64; p];
            let x = &paths[q * row + k * d..q * row + (k + 1) * d];
            for i in 0..d {
                xhat[i] = (x[i] - shift[i]) / scale[i];
            }
            basis.eval_into(&xhat, &mut powers, &mut psi);
            let c: f64 = psi.iter().zip(&beta_y).map(|(a, b)| a * b).sum();
            let mut z = vec![0.0f64; d];
            let mut z2 = 0.0;
            for i in 0..d {
                z[i] = psi.iter().zip(&beta_z[i]).map(|(a, b)| a * b).sum();
                z2 += z[i] * z[i];
            }
            s.y = picard(c, &z, dt).clamp(-lvl, lvl);
            s.sup_y = s.sup_y.max(growth * s.y.abs());
            s.z_energy += growth2 * z2 * dt;
        };
        if workers <= 1 {
            state.iter_mut().enumerate().for_each(|(q, s)| update(q, s));
        } else {
            pool.install(|| {
                state
                    .par_iter_mut()
                    .enumerate()
                    .for_each(|(q, s)| update(q, s))
            });
        }
        max_abs_y = max_abs_y.max(
            map_reduce_blocks(
                n_paths,
                workers,
                |range| range.fold(0.0f64, |m, q| m.max(state[q as usize].y.abs())),
                f64::max,
            )
            .expect("n_paths > 0"),
        );

        fits.push(NodeFit {
            node: k,
            shift: shift.to_vec(),
            scale,
            value_coefficients: beta_y,
            z_coefficients: beta_z,
            condition,
        });
    }
    fits.reverse();

    // Initial node: every path sits at x0, conditional expectations are means.
    let dt0 = grid.node(1) - grid.node(0);
    let head = map_reduce_blocks(
        n_paths,
        workers,
        |range| {
            let mut sums = vec![0.0f64; 1 + d];
            let mut dw = vec![0.0f64; d];
            for q in range {
                let y = state[q as usize].y;
                stream.fill_increments(path_offset + q, 0, dt0.sqrt(), &mut dw);
                sums[0] += y;
                for i in 0..d {
                    sums[1 + i] += y * dw[i];
                }
            }
            sums
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                *x += *y;
            }
            a
        },
    )
    .expect("n_paths > 0");
    let c0 = head[0] / n as f64;
    let z0: Vec<f64> = (0..d).map(|i| head[1 + i] / (n as f64 * dt0)).collect();
    let lvl0 = level(0.0);
    let y0 = picard(c0, &z0, dt0).clamp(-lvl0, lvl0);

    let head_defect = map_reduce_blocks(
        n_paths,
        workers,
        |range| {
            let mut sum = 0.0f64;
            let mut dw = vec![0.0f64; d];
            for q in range {
                stream.fill_increments(path_offset + q, 0, dt0.sqrt(), &mut dw);
                let mut martingale = 0.0;
                for i in 0..d {
                    martingale += z0[i] * dw[i];
                }
                let defect = state[q as usize].y - c0 - martingale;
                sum += defect * defect;
            }
            sum
        },
        |a, b| a + b,
    )
    .expect("n_paths > 0");
    defect_sum += head_defect;

    if !y0.is_finite() {
        return Err(Error::Blowup {
            step: 0,
            t: 0.0,
            detail: "initial value became non-finite".into(),
        });
    }
    let k_g = spec.driver.lip_y();
    let crude = (k_g * horizon).exp()
        * (spec.terminal.sup_norm()
            + spec.driver.g0().abs() * horizon * (k_g * horizon).exp());
    if y0.abs() > crude + 1e-9 {
        return Err(Error::Blowup {
            step: 0,
            t: 0.0,
            detail: format!("initial value {y0} exceeds the a-priori bound {crude}"),
        });
    }

    // Pathwise statistics: fold in the (deterministic) initial contributions.
    let z0_norm2: f64 = z0.iter().map(|v| v * v).sum();
    let tail = map_reduce_blocks(
        n_paths,
        workers,
        |range| {
            let mut sums = [0.0f64; 2];
            for q in range {
                let s = &state[q as usize];
                sums[0] += s.sup_y.max(y0.abs());
                sums[1] += (s.z_energy + z0_norm2 * dt0).sqrt();
            }
            sums
        },
        |mut a, b| {
            a[0] += b[0];
            a[1] += b[1];
            a
        },
    )
    .expect("n_paths > 0");
    max_abs_y = max_abs_y.max(y0.abs());

    let diagnostics = BsdeDiagnostics {
        max_condition,
        martingale_residual: (defect_sum / (n_steps as f64 * n as f64)).sqrt(),
        mean_sup_y: tail[0] / n as f64,
        mean_z_energy: tail[1] / n as f64,
        max_abs_y,
    };
    Ok(BsdeSolution {
        grid: grid.clone(),
        basis_degree,
        y0,
        z0,
        fits,
        diagnostics,
    })
}

/// Estimate u(T, x0): a backward solve when the spec has a driver, a plain
/// Monte Carlo mean of phi(X_T) when it does not. Either way the estimate is
/// the mean over `n_replications` independent path blocks and the stderr is
/// the replication spread.
pub fn estimate_u(
    spec: &ProblemSpec,
    stream: RngStream,
    x0: &[f64],
    params: &SolverParams,
    workers: usize,
) -> Result<UEstimate> {
    if spec.is_g_mode() {
        return Err(Error::InvalidSpec(
            "estimate_u handles classical specs only".into(),
        ));
    }
    let reps = params.n_replications;
    if reps < 2 {
        return Err(Error::InvalidParam {
            name: "n_replications",
            message: format!("need at least 2 replications, got {reps}"),
        });
    }
    let grid = TimeGrid::uniform(spec.horizon, params.n_steps)?;
    let mut replicates = Vec::with_capacity(reps);
    for rep in 0..reps {
        let offset = rep as u64 * params.n_paths;
        let estimate = if spec.driver.is_zero() {
            let sum = map_reduce_blocks(
                params.n_paths,
                workers,
                |range| -> Result<f64> {
                    let mut acc = 0.0;
                    for q in range {
                        let x =
                            crate::coupling::forward_terminal(spec, &grid, stream, offset + q, x0, None)?;
                        acc += spec.terminal.eval(&x);
                    }
                    Ok(acc)
                },
                |a, b| Ok(a? + b?),
            )
            .expect("n_paths > 0")?;
            sum / params.n_paths as f64
        } else {
            solve_bsde(
                spec,
                &grid,
                stream,
                x0,
                params.n_paths,
                params.basis_degree,
                params.picard_iters,
                offset,
                workers,
            )?
            .y0
        };
        replicates.push(estimate);
    }
    let value = replicates.iter().sum::<f64>() / reps as f64;
    let var = replicates
        .iter()
        .map(|r| (r - value) * (r - value))
        .sum::<f64>()
        / (reps as f64 - 1.0);
    Ok(UEstimate {
        value,
        stderr: (var / reps as f64).sqrt(),
        replicates,
    })
}

/// Estimate u at two start points with common random numbers (identical path
/// indices, hence identical increments) and report the per-replication
/// difference statistics.
pub fn estimate_u_pair(
    spec: &ProblemSpec,
    stream: RngStream,
    x: &[f64],
    y: &[f64],
    params: &SolverParams,
    workers: usize,
) -> Result<PairEstimate> {
    let at_x = estimate_u(spec, stream, x, params, workers)?;
    let at_y = estimate_u(spec, stream, y, params, workers)?;
    let reps = params.n_replications as f64;
    let diffs: Vec<f64> = at_x
        .replicates
        .iter()
        .zip(&at_y.replicates)
        .map(|(a, b)| a - b)
        .collect();
    let diff_mean = diffs.iter().sum::<f64>() / reps;
    let var = diffs
        .iter()
        .map(|v| (v - diff_mean) * (v - diff_mean))
        .sum::<f64>()
        / (reps - 1.0);
    Ok(PairEstimate {
        at_x,
        at_y,
        diff_mean,
        diff_stderr: (var / reps).sqrt(),
    })
}

/// Compare the pathwise a-priori quantities of independent solutions against
/// `d1 e^{mu T} (|phi|_inf + |g(0,0)|/mu)`.
pub fn bsde_apriori_check(
    solutions: &[BsdeSolution],
    spec: &ProblemSpec,
    d1: f64,
) -> Result<AprioriReport> {
    if solutions.len() < 2 {
        return Err(Error::InvalidParam {
            name: "solutions",
            message: format!("need at least 2 independent runs, got {}", solutions.len()),
        });
    }
    let mu = spec.driver.lip_y() + 4.0 * spec.driver.lip_z() * spec.driver.lip_z();
    let g0 = spec.driver.g0().abs();
    let g0_term = if g0 == 0.0 {
        0.0
    } else {
        if mu == 0.0 {
            return Err(Error::InvalidSpec(
                "the a-priori bound needs mu > 0 when g(0,0) != 0".into(),
            ));
        }
        g0 / mu
    };
    let bound = d1 * (mu * spec.horizon).exp() * (spec.terminal.sup_norm() + g0_term);
    let sup_means: Vec<f64> = solutions.iter().map(|s| s.diagnostics.mean_sup_y).collect();
    let z_means: Vec<f64> = solutions
        .iter()
        .map(|s| s.diagnostics.mean_z_energy)
        .collect();
    let per = 1u64; // replication granularity; spread carries the information
    let sup_y = MomentReport::from_batch_means(&sup_means, per)?;
    let z_energy = MomentReport::from_batch_means(&z_means, per)?;
    let pass = sup_y.mean <= bound && z_energy.mean <= bound;
    Ok(AprioriReport {
        mu,
        sup_y,
        z_energy,
        bound,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        get_builtin, DriftField, DriverSpec, SigmaField, TerminalSpec,
    };

    fn brownian_spec(terminal: TerminalSpec, driver: DriverSpec) -> ProblemSpec {
        ProblemSpec {
            d: 1,
            sigma: SigmaField::Constant { value: 1.0 },
            b: DriftField::Zero,
            driver,
            terminal,
            horizon: 1.0,
            gamma: None,
        }
    }

    #[test]
    fn basis_enumeration_is_graded_and_complete() {
        let b1 = PolyBasis::new(1, 3);
        assert_eq!(b1.len(), 4);
        assert_eq!(b1.exponents[0], vec![0], "constant first");
        let b2 = PolyBasis::new(2, 3);
        assert_eq!(b2.len(), 10, "C(2+3,2) monomials in d=2");
        for exps in &b2.exponents {
            assert!(exps.iter().sum::<u32>() <= 3);
        }
        let mut seen = b2.exponents.clone();
        seen.dedup();
        assert_eq!(seen.len(), 10, "no duplicate monomials");
    }

    #[test]
    fn constant_terminal_without_driver_is_exact() {
        let spec = brownian_spec(TerminalSpec::Constant { value: 2.5 }, DriverSpec::Zero);
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let sol = solve_bsde(&spec, &grid, RngStream::new(40, 0), &[0.0], 4096, 3, 3, 0, 2)
            .unwrap();
        assert!(
            (sol.y0 - 2.5).abs() < 1e-10,
            "constant value reproduced exactly, got {}",
            sol.y0
        );
        // Theoretical Z is zero; the estimate is mean(c dB)/dt = pure noise
        // with stderr c/sqrt(n dt) — allow 4 sigma.
        let se = 2.5 / (4096.0f64 * (1.0 / 16.0)).sqrt();
        assert!(
            sol.z0[0].abs() < 4.0 * se,
            "z0 {} beyond noise band {}",
            sol.z0[0],
            4.0 * se
        );
        assert!(sol.diagnostics.max_condition < 100.0);
    }

    #[test]
    fn linear_driver_matches_integrating_factor_oracle() {
        // g(y, z) = r y turns the value into e^{rT} E[phi(X_T)]. With common
        // paths the regression preserves sample means exactly, so the only
        // discrepancy is the (1 - r dt)-versus-e^{r dt} stepping factor.
        let spec = brownian_spec(
            TerminalSpec::CosWave {
                amplitude: 1.0,
                frequency: 1.0,
                phase: 0.0,
            },
            DriverSpec::Linear {
                g0: 0.0,
                y_coef: 0.5,
                z_coef: 0.0,
            },
        );
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let stream = RngStream::new(41, 0);
        let n: u64 = 16_384;
        let sol = solve_bsde(&spec, &grid, stream, &[0.2], n, 3, 3, 0, 2).unwrap();
        let mc = map_reduce_blocks(
            n,
            2,
            |range| -> Result<f64> {
                let mut acc = 0.0;
                for q in range {
                    let x = crate::coupling::forward_terminal(
                        &spec, &grid, stream, q, &[0.2], None,
                    )?;
                    acc += spec.terminal.eval(&x);
                }
                Ok(acc)
            },
            |a, b| Ok(a? + b?),
        )
        .unwrap()
        .unwrap()
            / n as f64;
        let oracle = (0.5f64).exp() * mc;
        let rel = (sol.y0 - oracle).abs() / oracle.abs();
        eprintln!("integrating-factor rel err: {rel:.5}");
        assert!(
            rel < 0.01,
            "integrating factor: y0 {} vs e^rT MC {}, rel {}",
            sol.y0,
            oracle,
            rel
        );
    }

    #[test]
    fn gaussian_sine_closed_form() {
        let spec = brownian_spec(
            TerminalSpec::CosWave {
                amplitude: 1.0,
                frequency: 1.0,
                phase: -std::f64::consts::FRAC_PI_2, // cos(x - pi/2) = sin(x)
            },
            DriverSpec::Zero,
        );
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let sol = solve_bsde(&spec, &grid, RngStream::new(42, 0), &[1.5], 65_536, 3, 3, 0, 2)
            .unwrap();
        let oracle = (-0.5f64).exp() * 1.5f64.sin();
        let rel = (sol.y0 - oracle).abs() / oracle;
        eprintln!("gaussian-sine rel err: {rel:.5}");
        assert!(
            rel < 0.01,
            "heat smoothing of sine: y0 {} vs e^{{-T/2}} sin(x) {}, rel {}",
            sol.y0,
            oracle,
            rel
        );
    }

    #[test]
    fn semilinear_builtin_solves_and_respects_sup_bound() {
        let spec = get_builtin("classical-semilinear").unwrap();
        let grid = TimeGrid::uniform(1.0, 25).unwrap();
        let sol = solve_bsde(&spec, &grid, RngStream::new(43, 0), &[0.3], 8192, 3, 3, 0, 2)
            .unwrap();
        assert!(sol.y0.is_finite());
        // |Y| bound e^{K_g T} |phi| + |g0| (e^{K_g T} - 1)/K_g within the
        // truncation headroom (the solver's sup-norm tolerance).
        let k_g = spec.driver.lip_y();
        let bound = (k_g * 1.0f64).exp() * 1.0 + 0.1 * ((k_g * 1.0f64).exp() - 1.0) / k_g;
        assert!(
            sol.diagnostics.max_abs_y <= TRUNCATION_HEADROOM * bound + 1e-9,
            "max |Y| {} exceeds comparison bound {} with headroom {}",
            sol.diagnostics.max_abs_y,
            bound,
            TRUNCATION_HEADROOM
        );
        assert!(sol.diagnostics.martingale_residual.is_finite());
        assert_eq!(sol.fits.len(), grid.n_steps() - 1);
    }

    #[test]
    fn martingale_residual_decreases_under_refinement() {
        let spec = get_builtin("classical-semilinear").unwrap();
        let run = |steps: usize| {
            let grid = TimeGrid::uniform(1.0, steps).unwrap();
            solve_bsde(&spec, &grid, RngStream::new(44, 0), &[0.3], 8192, 3, 3, 0, 2)
                .unwrap()
                .diagnostics
                .martingale_residual
        };
        let coarse = run(8);
        let fine = run(32);
        assert!(
            fine < coarse,
            "projection defect should shrink with dt: {fine} !< {coarse}"
        );
    }

    #[test]
    fn degree_three_to_four_invariance() {
        let spec = get_builtin("classical-semilinear").unwrap();
        let mut params = SolverParams {
            n_paths: 4096,
            n_steps: 25,
            basis_degree: 3,
            picard_iters: 3,
            n_replications: 4,
        };
        let stream = RngStream::new(45, 0);
        let a = estimate_u(&spec, stream, &[0.3], &params, 2).unwrap();
        params.basis_degree = 4;
        let b = estimate_u(&spec, stream, &[0.3], &params, 2).unwrap();
        let tol = 2.0 * (a.stderr.hypot(b.stderr)) + 1e-12;
        assert!(
            (a.value - b.value).abs() <= tol.max(2e-3),
            "degree bump moved y0 beyond noise: {} vs {}",
            a.value,
            b.value
        );
    }

    #[test]
    fn comparison_principle_within_noise() {
        // cos(x) <= 1 pointwise with the same driver implies y0 ordering.
        let spec_lo = get_builtin("classical-semilinear").unwrap();
        let spec_hi = ProblemSpec {
            terminal: TerminalSpec::Constant { value: 1.0 },
            ..spec_lo.clone()
        };
        let params = SolverParams {
            n_paths: 4096,
            n_steps: 25,
            basis_degree: 3,
            picard_iters: 3,
            n_replications: 4,
        };
        let stream = RngStream::new(46, 0);
        let lo = estimate_u(&spec_lo, stream, &[0.3], &params, 2).unwrap();
        let hi = estimate_u(&spec_hi, stream, &[0.3], &params, 2).unwrap();
        assert!(
            lo.value <= hi.value + 2.0 * (lo.stderr + hi.stderr),
            "comparison principle violated: {} > {}",
            lo.value,
            hi.value
        );
    }

    #[test]
    fn estimates_are_deterministic_and_worker_independent() {
        let spec = get_builtin("classical-semilinear").unwrap();
        let params = SolverParams {
            n_paths: 2048,
            n_steps: 16,
            basis_degree: 3,
            picard_iters: 3,
            n_replications: 2,
        };
        let stream = RngStream::new(47, 0);
        let a = estimate_u(&spec, stream, &[0.3], &params, 1).unwrap();
        let b = estimate_u(&spec, stream, &[0.3], &params, 4).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits(), "bit-identical value");
        assert_eq!(
            a.stderr.to_bits(),
            b.stderr.to_bits(),
            "bit-identical stderr"
        );
        let c = estimate_u(&spec, stream, &[0.3], &params, 1).unwrap();
        assert_eq!(a.value.to_bits(), c.value.to_bits(), "same seed, same value");
    }

    #[test]
    fn pair_estimates_share_noise() {
        let spec = get_builtin("classical-semilinear").unwrap();
        let params = SolverParams {
            n_paths: 2048,
            n_steps: 16,
            basis_degree: 3,
            picard_iters: 3,
            n_replications: 4,
        };
        let pair =
            estimate_u_pair(&spec, RngStream::new(48, 0), &[0.3], &[0.2], &params, 2).unwrap();
        // Common random numbers: the diff spread must be far below the
        // individual spreads for nearby start points.
        assert!(pair.diff_stderr < pair.at_x.stderr.max(pair.at_y.stderr));
        assert!(pair.diff_mean.abs() < 0.2, "0.1 separation, small diff");
    }

    #[test]
    fn apriori_bound_holds_with_configured_constant() {
        let spec = get_builtin("classical-semilinear").unwrap();
        let grid = TimeGrid::uniform(1.0, 25).unwrap();
        let sols: Vec<BsdeSolution> = (0..3)
            .map(|rep| {
                solve_bsde(
                    &spec,
                    &grid,
                    RngStream::new(49, 0),
                    &[0.3],
                    4096,
                    3,
                    3,
                    rep * 4096,
                    2,
                )
                .unwrap()
            })
            .collect();
        let report = bsde_apriori_check(&sols, &spec, 2.0).unwrap();
        assert!(
            report.pass,
            "sup_y {} or z_energy {} above bound {}",
            report.sup_y.mean, report.z_energy.mean, report.bound
        );
        assert!((report.mu - 2.0).abs() < 1e-15, "mu = K_g + 4 L_g^2 = 2");
    }

    #[test]
    fn zero_terminal_zero_driver_is_identically_zero() {
        let spec = brownian_spec(TerminalSpec::Constant { value: 0.0 }, DriverSpec::Zero);
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let sol = solve_bsde(&spec, &grid, RngStream::new(50, 0), &[0.0], 2048, 2, 3, 0, 1)
            .unwrap();
        assert_eq!(sol.y0, 0.0);
        assert_eq!(sol.diagnostics.mean_sup_y, 0.0);
        assert_eq!(sol.diagnostics.mean_z_energy, 0.0);
    }

    #[test]
    fn step_size_and_input_validation() {
        let spec = get_builtin("classical-semilinear").unwrap(); // K_g = 1
        let coarse = TimeGrid::uniform(2.0, 2).unwrap(); // dt = 1 >= 1/K_g
        let err = solve_bsde(
            &spec,
            &coarse,
            RngStream::new(51, 0),
            &[0.0],
            2048,
            3,
            3,
            0,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::StepSize(_)), "got {err}");
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        assert!(solve_bsde(&spec, &grid, RngStream::new(51, 0), &[0.0], 99, 3, 3, 0, 1).is_err());
        assert!(
            solve_bsde(&spec, &grid, RngStream::new(51, 0), &[0.0, 1.0], 2048, 3, 3, 0, 1)
                .is_err()
        );
        let g_spec = get_builtin("g-const").unwrap();
        assert!(matches!(
            solve_bsde(&g_spec, &grid, RngStream::new(51, 0), &[0.0], 2048, 3, 3, 0, 1),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn driver_free_estimate_dispatches_to_plain_monte_carlo() {
        let spec = brownian_spec(TerminalSpec::Constant { value: 3.0 }, DriverSpec::Zero);
        let params = SolverParams {
            n_paths: 1024,
            n_steps: 4,
            basis_degree: 3,
            picard_iters: 3,
            n_replications: 2,
        };
        let est = estimate_u(&spec, RngStream::new(52, 0), &[0.0], &params, 1).unwrap();
        assert_eq!(est.value, 3.0, "constant payoff, exact mean");
        assert_eq!(est.stderr, 0.0);
    }
}

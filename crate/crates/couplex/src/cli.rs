//! Batch front-end: JSON experiment configs in, JSON + CSV artifacts out.
//!
//! [`run`] dispatches one validated [`ExperimentConfig`] to the library,
//! writes `results.json`, one kind-specific CSV, and `manifest.json` into
//! the output directory, and reports pass/fail. The exit-code contract of
//! the binary built on top distinguishes a *verification failure* (a bound
//! or identity violated beyond its noise allowance: exit 2) from a *tool
//! error* (bad config, blow-up, budget exhaustion: exit 1), so CI can treat
//! bound violations as red without conflating them with crashes.
//!
//! Determinism contract: `results.json` and the CSV are pure functions of
//! the config. Worker counts change scheduling only — every estimator in
//! this crate reduces in a fixed block tree, and the harness evaluates
//! independent pairs with single-threaded inner loops — so re-running an
//! identical config at 1, 2, or 8 workers reproduces the result files byte
//! for byte. The manifest additionally records wall-clock timing and the
//! worker count, which is exactly why it is *not* covered by the
//! byte-identity guarantee.
//!
//! Every `results.json` embeds the derived-constants snapshot used by the
//! run, so any bound appearing in an artifact can be recomputed from the
//! artifact alone.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bsde::{estimate_u, SolverParams, UEstimate};
use crate::coupling::{
    coupled_summary, girsanov_identity_check, IdentityReport, SimMeasure, DEFAULT_DRIFT_CAP,
};
use crate::error::{Error, Result};
use crate::gexp::{
    evaluate_g_semigroup, solve_with_error_estimate, ControlFamily, FdParams, GMcParams,
    GValueReport, SearchPolicy,
};
use crate::harness::{
    verify_corollary, verify_main1, verify_main2, GradientReport, Main2Estimator, PairSet,
    DEFAULT_BASE_SEPARATION, DEFAULT_LEVELS,
};
use crate::model::{
    builtin_specs, check_schedule_inequality, derive_constants, get_builtin, ConstantConfig,
    ConstantsMode, CouplingSchedule, DerivedConstants, InequalityRow, ProblemSpec, TerminalSpec,
};
use crate::paths::{map_reduce_blocks, RngStream, TimeGrid};

/// Tolerance of the schedule-inequality margin check.
pub const SCHEDULE_TOLERANCE: f64 = 1e-12;

/// Experiment dispatch kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Bsde,
    GSemigroup,
    GHeat,
    VerifyMain1,
    VerifyCorollary,
    VerifyMain2,
    VerifyGirsanov,
    ScheduleCheck,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Bsde => "bsde",
            ExperimentKind::GSemigroup => "g-semigroup",
            ExperimentKind::GHeat => "g-heat",
            ExperimentKind::VerifyMain1 => "verify-main1",
            ExperimentKind::VerifyCorollary => "verify-corollary",
            ExperimentKind::VerifyMain2 => "verify-main2",
            ExperimentKind::VerifyGirsanov => "verify-girsanov",
            ExperimentKind::ScheduleCheck => "schedule-check",
        };
        write!(f, "{name}")
    }
}

/// Control-supremum parameters for the `g-semigroup` kind and the sampling
/// route of `verify-main2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlParams {
    /// Spatial feedback cells of the policy family.
    pub cells: usize,
    #[serde(default = "default_policy")]
    pub policy: SearchPolicy,
    /// Maximum distinct policies priced per search.
    #[serde(default = "default_budget")]
    pub budget: usize,
    pub n_paths: u64,
    pub n_steps: usize,
}

fn default_policy() -> SearchPolicy {
    SearchPolicy::Exhaustive
}

fn default_budget() -> usize {
    256
}

impl ControlParams {
    fn mc(&self) -> GMcParams {
        GMcParams {
            n_paths: self.n_paths,
            n_steps: self.n_steps,
        }
    }
}

/// Pair placement for the verification kinds.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairParams {
    /// Common midpoint of every pair; defaults to the origin.
    #[serde(default)]
    pub base: Option<Vec<f64>>,
    /// Random unit directions added after the coordinate axes.
    #[serde(default)]
    pub n_random: usize,
    /// Dyadic separation levels (at least 3).
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Coarsest separation.
    #[serde(default = "default_r0")]
    pub r0: f64,
}

fn default_levels() -> usize {
    DEFAULT_LEVELS
}

fn default_r0() -> f64 {
    DEFAULT_BASE_SEPARATION
}

impl Default for PairParams {
    fn default() -> Self {
        PairParams {
            base: None,
            n_random: 0,
            levels: DEFAULT_LEVELS,
            r0: DEFAULT_BASE_SEPARATION,
        }
    }
}

/// One experiment: a kind, a problem, a seed, and kind-specific sections.
///
/// The `spec` field is either a built-in id (JSON string) or an inline
/// problem specification (JSON object); it is kept as raw JSON so that
/// resolution errors name the offending field. The seed is mandatory —
/// there is no wall-clock fallback, reproducibility is the point.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub spec: serde_json::Value,
    pub seed: u64,
    #[serde(default)]
    pub constants: ConstantConfig,
    /// Start point; defaults to the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Second start point for the pair kinds (`simulate`, `verify-girsanov`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    /// Stderr batches for the identity check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_batches: Option<usize>,
    /// Terminal cutoff of the coupling grid (the simulated horizon is
    /// T - h_min).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_min: Option<f64>,
    /// Coupling drift cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_cap: Option<f64>,
    /// Backward-solver parameters (`bsde`, `verify-main1`, `verify-corollary`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverParams>,
    /// Finite-difference parameters (`g-heat`, one-dimensional `verify-main2`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd: Option<FdParams>,
    /// Control-supremum parameters (`g-semigroup`, sampling `verify-main2`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlParams>,
    /// Pair placement for the verification kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PairParams>,
    /// Test functions for `verify-girsanov`; defaults to a standard trio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phis: Option<Vec<TerminalSpec>>,
    /// Output directory; overridable from the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Read and parse a config file. Parse errors carry the file path and the
/// serde message, which names missing or unknown fields.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    /// Resolve the spec field to a problem: a JSON string is a built-in id,
    /// an object is an inline spec. Inline parse errors name the field.
    pub fn resolve_spec(&self) -> Result<(String, ProblemSpec)> {
        match &self.spec {
            serde_json::Value::String(id) => Ok((id.clone(), get_builtin(id)?)),
            value @ serde_json::Value::Object(_) => {
                let spec: ProblemSpec = serde_json::from_value(value.clone())
                    .map_err(|e| Error::Config(format!("inline spec: {e}")))?;
                spec.validate()?;
                Ok(("inline".to_string(), spec))
            }
            other => Err(Error::Config(format!(
                "spec must be a built-in id or an inline object, got {other}"
            ))),
        }
    }

    fn x0(&self, d: usize) -> Result<Vec<f64>> {
        match &self.x0 {
            None => Ok(vec![0.0; d]),
            Some(v) if v.len() == d => Ok(v.clone()),
            Some(v) => Err(Error::Config(format!(
                "x0 has length {}, spec dimension is {d}",
                v.len()
            ))),
        }
    }

    fn y0(&self, d: usize) -> Result<Vec<f64>> {
        match &self.y0 {
            None => Err(Error::Config(
                "y0 is required for pair experiments".to_string(),
            )),
            Some(v) if v.len() == d => Ok(v.clone()),
            Some(v) => Err(Error::Config(format!(
                "y0 has length {}, spec dimension is {d}",
                v.len()
            ))),
        }
    }

    fn require<'a, T>(&self, section: &'a Option<T>, name: &str) -> Result<&'a T> {
        section.as_ref().ok_or_else(|| {
            Error::Config(format!("`{name}` section is required for kind {}", self.kind))
        })
    }

    fn pair_set(&self, d: usize, stream: RngStream) -> Result<PairSet> {
        let params = self.pairs.clone().unwrap_or_default();
        let base = match params.base {
            Some(b) if b.len() == d => b,
            Some(b) => {
                return Err(Error::Config(format!(
                    "pairs.base has length {}, spec dimension is {d}",
                    b.len()
                )))
            }
            None => vec![0.0; d],
        };
        PairSet::dyadic(base, params.n_random, params.levels, params.r0, stream)
    }
}

/// Constants mode a spec naturally verifies: uncertainty specs get the
/// sublinear bound, classical driver-carrying specs the semilinear one,
/// driver-free classical specs the corollary.
pub fn snapshot_mode(spec: &ProblemSpec) -> ConstantsMode {
    if spec.is_g_mode() {
        ConstantsMode::Main2
    } else if spec.driver.is_zero() {
        ConstantsMode::Corollary
    } else {
        ConstantsMode::Main1
    }
}

/// One catalogue line of [`list_builtin_specs`].
#[derive(Clone, Debug, Serialize)]
pub struct CatalogueEntry {
    pub id: &'static str,
    pub summary: &'static str,
    pub mode: ConstantsMode,
    pub constants: DerivedConstants,
}

/// Derive constants for every built-in spec under its natural mode.
pub fn list_builtin_specs(config: &ConstantConfig) -> Result<Vec<CatalogueEntry>> {
    builtin_specs()
        .into_iter()
        .map(|b| {
            let mode = snapshot_mode(&b.spec);
            let constants = derive_constants(&b.spec, mode, config)?;
            Ok(CatalogueEntry {
                id: b.id,
                summary: b.summary,
                mode,
                constants,
            })
        })
        .collect()
}

/// Compact float rendering for catalogue text: plain decimal in a moderate
/// range, scientific notation outside it.
fn compact(x: f64) -> String {
    if x == 0.0 || (x.abs() >= 1e-3 && x.abs() < 1e6) {
        let s = format!("{x:.6}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{x:.4e}")
    }
}

/// Human-readable catalogue text.
pub fn render_catalogue(entries: &[CatalogueEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let c = &e.constants;
        out.push_str(&format!(
            "{:<22} {:<10} d={} T={} sigma=[{}, {}] L_b={} L_sigma={} |phi|={} rate={} bound_slope={}\n",
            e.id,
            e.mode.to_string(),
            c.d,
            c.horizon,
            compact(c.sigma_min),
            compact(c.sigma_max),
            compact(c.lip_b),
            compact(c.lip_sigma),
            compact(c.phi_sup),
            compact(c.rate),
            compact(crate::model::theorem_bound(c).slope),
        ));
        out.push_str(&format!("{:<22} {}\n", "", e.summary));
    }
    out
}

/// Kind-specific payload embedded in `results.json`.
#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum RunPayload {
    Simulate(SimulatePayload),
    Bsde(BsdePayload),
    GSemigroup(GSemigroupPayload),
    GHeat(GHeatPayload),
    Verify(Box<GradientReport>),
    Girsanov(GirsanovPayload),
    ScheduleCheck(SchedulePayload),
}

/// Coupled-pair gap statistics against the schedule's contraction value.
#[derive(Clone, Debug, Serialize)]
pub struct SimulatePayload {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    /// Effective horizon T - h_min actually simulated.
    pub t_eff: f64,
    pub n_steps: usize,
    pub n_paths: u64,
    pub mean_h: f64,
    pub stderr_h: f64,
    /// Deterministic gap value |x-y|^2 exp(-2 int_0^{t_eff} ds/xi_s) of the
    /// constant-unit-coefficient contraction; an oracle when sigma = 1 and
    /// b = 0, a labeled reference otherwise.
    pub ode_h: f64,
    pub rel_gap: f64,
    pub mean_log_weight: f64,
    pub mean_cap_fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BsdePayload {
    pub x0: Vec<f64>,
    pub solver: SolverParams,
    pub estimate: UEstimate,
}

#[derive(Clone, Debug, Serialize)]
pub struct GSemigroupPayload {
    pub x0: Vec<f64>,
    pub cells: usize,
    pub report: GValueReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct GHeatPayload {
    pub x0: f64,
    pub value: f64,
    /// Step-halving error estimate at x0.
    pub error_estimate: f64,
    pub dx: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub max_abs_u: f64,
    pub phi_sup: f64,
    /// Grid columns for the CSV; kept out of results.json.
    #[serde(skip_serializing)]
    pub xs: Vec<f64>,
    #[serde(skip_serializing)]
    pub terminal: Vec<f64>,
    #[serde(skip_serializing)]
    pub u: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GirsanovPayload {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub n_paths: u64,
    pub reports: Vec<IdentityReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SchedulePayload {
    pub theta: f64,
    pub p_grid: Vec<f64>,
    pub n_times: usize,
    pub max_margin: f64,
    pub worst_p: f64,
    pub worst_t: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Full grid rows for the CSV; kept out of results.json.
    #[serde(skip_serializing)]
    pub rows: Vec<InequalityRow>,
}

/// Reproducibility record written next to the results.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    /// FNV-1a hash of the canonical (serde-normalized) config JSON.
    pub config_hash: String,
    pub version: &'static str,
    pub constants: DerivedConstants,
    pub timing_ms: u128,
    pub workers: usize,
    /// Result files written before the manifest, in writing order.
    pub outputs: Vec<String>,
}

/// What `run` produced.
#[derive(Debug)]
pub struct RunOutcome {
    /// False exactly when a verification-kind run failed its check.
    pub passed: bool,
    pub out_dir: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub manifest: RunManifest,
}

#[derive(Serialize)]
struct ResultsFile<'a> {
    kind: ExperimentKind,
    spec_id: &'a str,
    seed: u64,
    constants: &'a DerivedConstants,
    payload: &'a RunPayload,
}

/// Stream tags reserved for the front-end (the library's own tests use
/// disjoint tags, so CLI artifacts never alias test streams).
const TAG_SIMULATE: u16 = 100;
const TAG_BSDE: u16 = 101;
const TAG_GSEMIGROUP: u16 = 102;
const TAG_DIRECTIONS: u16 = 103;
const TAG_MAIN1: u16 = 104;
const TAG_COROLLARY: u16 = 105;
const TAG_MAIN2: u16 = 106;
const TAG_GIRSANOV: u16 = 107;

/// Execute a config and persist artifacts. `out_override` (the `--out`
/// flag) wins over the config's `out_dir`, which defaults to `out`.
pub fn run(
    config: &ExperimentConfig,
    workers: usize,
    out_override: Option<&Path>,
) -> Result<RunOutcome> {
    let started = Instant::now();
    let (spec_id, spec) = config.resolve_spec()?;
    let out_dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    let (payload, passed, constants) = dispatch(config, &spec_id, &spec, workers)?;

    std::fs::create_dir_all(&out_dir)?;
    let mut outputs = Vec::new();

    let results = ResultsFile {
        kind: config.kind,
        spec_id: &spec_id,
        seed: config.seed,
        constants: &constants,
        payload: &payload,
    };
    let results_path = out_dir.join("results.json");
    let mut results_text = serde_json::to_string_pretty(&results)?;
    results_text.push('\n');
    std::fs::write(&results_path, results_text)?;
    outputs.push(results_path);

    let (csv_name, csv_text) = render_csv(&payload);
    let csv_path = out_dir.join(csv_name);
    std::fs::write(&csv_path, csv_text)?;
    outputs.push(csv_path);

    let manifest = RunManifest {
        config_hash: format!("{:016x}", fnv1a(serde_json::to_string(config)?.as_bytes())),
        version: env!("CARGO_PKG_VERSION"),
        constants,
        timing_ms: started.elapsed().as_millis(),
        workers,
        outputs: outputs
            .iter()
            .map(|p| {
                p.file_name()
                    .expect("output paths carry file names")
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let mut manifest_text = serde_json::to_string_pretty(&manifest)?;
    manifest_text.push('\n');
    std::fs::write(&manifest_path, manifest_text)?;
    outputs.push(manifest_path);

    Ok(RunOutcome {
        passed,
        out_dir,
        outputs,
        manifest,
    })
}

fn dispatch(
    config: &ExperimentConfig,
    spec_id: &str,
    spec: &ProblemSpec,
    workers: usize,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    match config.kind {
        ExperimentKind::Simulate => run_simulate(config, spec, workers),
        ExperimentKind::Bsde => run_bsde(config, spec, workers),
        ExperimentKind::GSemigroup => run_g_semigroup(config, spec, workers),
        ExperimentKind::GHeat => run_g_heat(config, spec),
        ExperimentKind::VerifyMain1 => run_verify_main1(config, spec_id, spec, workers),
        ExperimentKind::VerifyCorollary => run_verify_corollary(config, spec_id, spec, workers),
        ExperimentKind::VerifyMain2 => run_verify_main2(config, spec_id, spec, workers),
        ExperimentKind::VerifyGirsanov => run_verify_girsanov(config, spec, workers),
        ExperimentKind::ScheduleCheck => run_schedule_check(config, spec),
    }
}

fn require_classical(spec: &ProblemSpec, kind: ExperimentKind) -> Result<()> {
    if spec.is_g_mode() {
        return Err(Error::Config(format!(
            "kind {kind} runs classical specs; use the g-* kinds for uncertainty sets"
        )));
    }
    Ok(())
}

fn run_simulate(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
    workers: usize,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    require_classical(spec, config.kind)?;
    let constants = derive_constants(spec, snapshot_mode(spec), &config.constants)?;
    let schedule = CouplingSchedule::classical(&constants)?;
    let x0 = config.x0(spec.d)?;
    let y0 = config.y0(spec.d)?;
    let n_paths = config.n_paths.unwrap_or(1 << 14);
    let n0 = config.n_steps.unwrap_or(64);
    let h_min = config.h_min.unwrap_or(1e-3);
    let drift_cap = config.drift_cap.unwrap_or(DEFAULT_DRIFT_CAP);
    let grid = TimeGrid::geometric(spec.horizon, n0, 0.5, h_min)?;
    let stream = RngStream::new(config.seed, TAG_SIMULATE);

    let acc = map_reduce_blocks(
        n_paths,
        workers,
        |range| -> Result<[f64; 4]> {
            let mut a = [0.0; 4];
            for path in range {
                let s = coupled_summary(
                    spec,
                    &schedule,
                    &grid,
                    stream,
                    path,
                    &x0,
                    &y0,
                    drift_cap,
                    SimMeasure::Direct,
                    None,
                )?;
                a[0] += s.h_t;
                a[1] += s.h_t * s.h_t;
                a[2] += s.log_weight;
                a[3] += s.cap_fraction;
            }
            Ok(a)
        },
        |a, b| {
            let (a, b) = (a?, b?);
            Ok([a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]])
        },
    )
    .expect("n_paths is validated positive")?;

    let n = n_paths as f64;
    let mean_h = acc[0] / n;
    let var = (acc[1] / n - mean_h * mean_h).max(0.0);
    let stderr_h = (var / n).sqrt();
    let t_eff = grid.t_end();
    let r2: f64 = x0
        .iter()
        .zip(&y0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let ode_h = r2 * (-2.0 * schedule.integral_inv_xi(0.0, t_eff)?).exp();
    let payload = SimulatePayload {
        x0,
        y0,
        t_eff,
        n_steps: grid.n_steps(),
        n_paths,
        mean_h,
        stderr_h,
        ode_h,
        rel_gap: (mean_h - ode_h).abs() / ode_h.abs().max(f64::MIN_POSITIVE),
        mean_log_weight: acc[2] / n,
        mean_cap_fraction: acc[3] / n,
    };
    Ok((RunPayload::Simulate(payload), true, constants))
}

fn run_bsde(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
    workers: usize,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    require_classical(spec, config.kind)?;
    let constants = derive_constants(spec, snapshot_mode(spec), &config.constants)?;
    let solver = config.require(&config.solver, "solver")?.clone();
    let x0 = config.x0(spec.d)?;
    let estimate = estimate_u(
        spec,
        RngStream::new(config.seed, TAG_BSDE),
        &x0,
        &solver,
        workers,
    )?;
    let payload = BsdePayload {
        x0,
        solver,
        estimate,
    };
    Ok((RunPayload::Bsde(payload), true, constants))
}

fn run_g_semigroup(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
    workers: usize,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    let constants = derive_constants(spec, ConstantsMode::Main2, &config.constants)?;
    let control = config.require(&config.control, "control")?;
    let family = ControlFamily::extreme_points(spec, control.cells, control.policy, control.budget)?;
    let x0 = config.x0(spec.d)?;
    let report = evaluate_g_semigroup(
        spec,
        &x0,
        &family,
        &control.mc(),
        RngStream::new(config.seed, TAG_GSEMIGROUP),
        workers,
    )?;
    let payload = GSemigroupPayload {
        x0,
        cells: control.cells,
        report,
    };
    Ok((RunPayload::GSemigroup(payload), true, constants))
}

fn run_g_heat(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    let constants = derive_constants(spec, ConstantsMode::Main2, &config.constants)?;
    let fd = config.require(&config.fd, "fd")?;
    let x0 = config.x0(spec.d)?[0];
    let (solution, error_estimate) = solve_with_error_estimate(spec, fd, x0)?;
    let payload = GHeatPayload {
        x0,
        value: solution.value_at(x0)?,
        error_estimate,
        dx: solution.dx,
        dt: solution.dt,
        n_steps: solution.n_steps,
        max_abs_u: solution.max_abs_u,
        phi_sup: solution.phi_sup,
        xs: solution.xs,
        terminal: solution.terminal,
        u: solution.u,
    };
    Ok((RunPayload::GHeat(payload), true, constants))
}

fn run_verify_main1(
    config: &ExperimentConfig,
    spec_id: &str,
    spec: &ProblemSpec,
    workers: usize,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    let solver = config.solver.clone().unwrap_or_default();
    let pairs = config.pair_set(spec.d, RngStream::new(config.seed, TAG_DIRECTIONS))?;
    let report = verify_main1(
        spec,
        spec_id,
        &pairs,
        &solver,
        &config.constants,
        RngStream::new(config.seed, TAG_MAIN1),
        workers,
    )?;
    let constants = report.constants.clone();
    let passed = report.pass;
    Ok((RunPayload::Verify(Box::new(report)), passed, constants))
}

fn run_verify_corollary(
    config: &ExperimentConfig,
    spec_id: &str,
    spec: &ProblemSpec,
    workers: usize,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    let solver = config.solver.clone().unwrap_or_default();
    let pairs = config.pair_set(spec.d, RngStream::new(config.seed, TAG_DIRECTIONS))?;
    let report = verify_corollary(
        spec,
        spec_id,
        &pairs,
        &solver,
        &config.constants,
        RngStream::new(config.seed, TAG_COROLLARY),
        workers,
    )?;
    let constants = report.constants.clone();
    let passed = report.pass;
    Ok((RunPayload::Verify(Box::new(report)), passed, constants))
}

fn run_verify_main2(
    config: &ExperimentConfig,
    spec_id: &str,
    spec: &ProblemSpec,
    workers: usize,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    let pairs = config.pair_set(spec.d, RngStream::new(config.seed, TAG_DIRECTIONS))?;
    let report = match (&config.fd, &config.control) {
        (Some(fd), _) if spec.d == 1 => verify_main2(
            spec,
            spec_id,
            &pairs,
            &Main2Estimator::FiniteDifference(fd),
            &config.constants,
            workers,
        )?,
        (_, Some(control)) => {
            let family =
                ControlFamily::extreme_points(spec, control.cells, control.policy, control.budget)?;
            verify_main2(
                spec,
                spec_id,
                &pairs,
                &Main2Estimator::ControlSup {
                    family: &family,
                    params: &control.mc(),
                    stream: RngStream::new(config.seed, TAG_MAIN2),
                },
                &config.constants,
                workers,
            )?
        }
        _ => {
            return Err(Error::Config(format!(
                "kind {} needs an `fd` section (d = 1) or a `control` section",
                config.kind
            )))
        }
    };
    let constants = report.constants.clone();
    let passed = report.pass;
    Ok((RunPayload::Verify(Box::new(report)), passed, constants))
}

fn default_phis(d: usize) -> Vec<TerminalSpec> {
    vec![
        TerminalSpec::CosWave {
            amplitude: 1.0,
            frequency: 1.0,
            phase: 0.0,
        },
        TerminalSpec::TanhStep {
            amplitude: 1.0,
            scale: 2.0,
        },
        TerminalSpec::GaussBump {
            height: 1.0,
            width: 1.0,
            center: vec![0.0; d],
        },
    ]
}

fn run_verify_girsanov(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
    workers: usize,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    require_classical(spec, config.kind)?;
    let constants = derive_constants(spec, snapshot_mode(spec), &config.constants)?;
    let schedule = CouplingSchedule::classical(&constants)?;
    let x0 = config.x0(spec.d)?;
    let y0 = config.y0(spec.d)?;
    let n_paths = config.n_paths.unwrap_or(1 << 16);
    let n_batches = config.n_batches.unwrap_or(32);
    let n0 = config.n_steps.unwrap_or(64);
    let h_min = config.h_min.unwrap_or(1e-3);
    let drift_cap = config.drift_cap.unwrap_or(DEFAULT_DRIFT_CAP);
    let grid = TimeGrid::geometric(spec.horizon, n0, 0.5, h_min)?;
    let phis = config.phis.clone().unwrap_or_else(|| default_phis(spec.d));
    let reports = girsanov_identity_check(
        spec,
        &schedule,
        &grid,
        RngStream::new(config.seed, TAG_GIRSANOV),
        &x0,
        &y0,
        drift_cap,
        None,
        &phis,
        n_paths,
        n_batches,
        workers,
    )?;
    let passed = reports.iter().all(|r| r.pass);
    let payload = GirsanovPayload {
        x0,
        y0,
        n_paths,
        reports,
    };
    Ok((RunPayload::Girsanov(payload), passed, constants))
}

fn run_schedule_check(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
) -> Result<(RunPayload, bool, DerivedConstants)> {
    let mode = snapshot_mode(spec);
    let constants = derive_constants(spec, mode, &config.constants)?;
    let schedule = if spec.is_g_mode() {
        CouplingSchedule::g_mode(&constants)?
    } else {
        CouplingSchedule::classical(&constants)?
    };
    let p_grid = vec![1.0, 1.5, 2.0, 2.5];
    let n_times = 1000;
    let t_grid: Vec<f64> = (0..n_times)
        .map(|i| spec.horizon * i as f64 / n_times as f64)
        .collect();
    let report = check_schedule_inequality(&schedule, &constants, &p_grid, &t_grid)?;
    let pass = report.pass(SCHEDULE_TOLERANCE);
    let payload = SchedulePayload {
        theta: report.theta,
        p_grid,
        n_times,
        max_margin: report.max_margin,
        worst_p: report.worst_p,
        worst_t: report.worst_t,
        tolerance: SCHEDULE_TOLERANCE,
        pass,
        rows: report.rows,
    };
    Ok((RunPayload::ScheduleCheck(payload), pass, constants))
}

/// RFC-4180 escaping: quote a field when it contains a comma, a quote, or a
/// line break, doubling interior quotes.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(payload: &RunPayload) -> (&'static str, String) {
    match payload {
        RunPayload::Simulate(p) => {
            let mut s = String::from("t_eff,n_paths,mean_h,stderr_h,ode_h,rel_gap,mean_cap_fraction\r\n");
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\r\n",
                p.t_eff, p.n_paths, p.mean_h, p.stderr_h, p.ode_h, p.rel_gap, p.mean_cap_fraction
            ));
            ("gap.csv", s)
        }
        RunPayload::Bsde(p) => {
            let mut s = String::from("replicate,u\r\n");
            for (i, v) in p.estimate.replicates.iter().enumerate() {
                s.push_str(&format!("{i},{v}\r\n"));
            }
            s.push_str(&format!("mean,{}\r\n", p.estimate.value));
            s.push_str(&format!("stderr,{}\r\n", p.estimate.stderr));
            ("estimate.csv", s)
        }
        RunPayload::GSemigroup(p) => {
            let mut s = String::from("value,stderr,lower_bound,evaluations,best_control\r\n");
            let control = p
                .report
                .best_control
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";");
            s.push_str(&format!(
                "{},{},{},{},{}\r\n",
                p.report.value,
                p.report.stderr,
                p.report.lower_bound,
                p.report.evaluations,
                csv_field(&control)
            ));
            ("value.csv", s)
        }
        RunPayload::GHeat(p) => {
            let mut s = String::from("x,terminal,u\r\n");
            for i in 0..p.xs.len() {
                s.push_str(&format!("{},{},{}\r\n", p.xs[i], p.terminal[i], p.u[i]));
            }
            ("solution.csv", s)
        }
        RunPayload::Verify(report) => ("quotients.csv", report.to_csv()),
        RunPayload::Girsanov(p) => {
            let mut s =
                String::from("phi,weighted_mean,direct_mean,diff_mean,diff_stderr,pass\r\n");
            for r in &p.reports {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\r\n",
                    csv_field(&r.phi),
                    r.weighted_mean,
                    r.direct_mean,
                    r.diff_mean,
                    r.diff_stderr,
                    r.pass
                ));
            }
            ("identity.csv", s)
        }
        RunPayload::ScheduleCheck(p) => {
            let mut s = String::from("p,t,xi,dxi,margin\r\n");
            for r in &p.rows {
                s.push_str(&format!("{},{},{},{},{}\r\n", r.p, r.t, r.xi, r.dxi, r.margin));
            }
            ("inequality.csv", s)
        }
    }
}

/// FNV-1a 64-bit hash (stable across platforms and releases; the manifest
/// records it so identical configs are identifiable at a glance).
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config(kind: ExperimentKind, spec: serde_json::Value) -> ExperimentConfig {
        ExperimentConfig {
            kind,
            spec,
            seed: 7,
            constants: ConstantConfig::default(),
            x0: None,
            y0: None,
            n_paths: None,
            n_steps: None,
            n_batches: None,
            h_min: None,
            drift_cap: None,
            solver: None,
            fd: None,
            control: None,
            pairs: None,
            phis: None,
            out_dir: None,
        }
    }

    #[test]
    fn config_parsing_names_missing_fields() {
        // Missing seed.
        let err = serde_json::from_str::<ExperimentConfig>(
            r#"{"kind": "schedule-check", "spec": "classical-const"}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("seed"), "error must name `seed`: {err}");

        // Inline spec missing the horizon.
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{
                "kind": "schedule-check",
                "seed": 1,
                "spec": {
                    "d": 1,
                    "sigma": {"kind": "constant", "value": 1.0},
                    "b": {"kind": "zero"},
                    "driver": {"kind": "zero"},
                    "terminal": {"kind": "constant", "value": 0.5}
                }
            }"#,
        )
        .expect("config with inline spec parses");
        let err = cfg.resolve_spec().unwrap_err().to_string();
        assert!(err.contains('T'), "error must name the missing `T`: {err}");

        // Unknown top-level fields are rejected.
        let err = serde_json::from_str::<ExperimentConfig>(
            r#"{"kind": "schedule-check", "spec": "classical-const", "seed": 1, "bogus": 2}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("bogus"), "error must name the unknown field: {err}");
    }

    #[test]
    fn spec_resolution_accepts_builtin_ids_and_inline_objects() {
        let cfg = minimal_config(
            ExperimentKind::ScheduleCheck,
            serde_json::json!("classical-const"),
        );
        let (id, spec) = cfg.resolve_spec().expect("builtin resolves");
        assert_eq!(id, "classical-const");
        assert_eq!(spec.d, 1);

        let inline = serde_json::to_value(&spec).unwrap();
        let cfg = minimal_config(ExperimentKind::ScheduleCheck, inline);
        let (id, spec2) = cfg.resolve_spec().expect("inline resolves");
        assert_eq!(id, "inline");
        assert_eq!(
            serde_json::to_string(&spec).unwrap(),
            serde_json::to_string(&spec2).unwrap(),
            "inline round trip preserves the spec"
        );

        let cfg = minimal_config(ExperimentKind::ScheduleCheck, serde_json::json!(42));
        assert!(cfg.resolve_spec().is_err(), "numbers are not specs");
        let cfg = minimal_config(ExperimentKind::ScheduleCheck, serde_json::json!("nope"));
        assert!(cfg.resolve_spec().is_err(), "unknown builtin id");
    }

    #[test]
    fn catalogue_constants_round_trip() {
        let config = ConstantConfig::default();
        let entries = list_builtin_specs(&config).expect("catalogue derives");
        assert!(!entries.is_empty(), "catalogue must be non-empty");
        for e in &entries {
            let spec = get_builtin(e.id).expect("catalogue ids resolve");
            spec.validate().expect("catalogue specs validate");
            let fresh = derive_constants(&spec, e.mode, &config).expect("constants derive");
            assert_eq!(
                serde_json::to_string(&e.constants).unwrap(),
                serde_json::to_string(&fresh).unwrap(),
                "catalogue constants equal a fresh derivation for {}",
                e.id
            );
        }
        let text = render_catalogue(&entries);
        for e in &entries {
            assert!(text.contains(e.id), "rendered catalogue lists {}", e.id);
        }
    }

    #[test]
    fn csv_escaping_follows_rfc_4180() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
        assert_eq!(csv_field("two\nlines"), "\"two\nlines\"");
    }

    #[test]
    fn fnv1a_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn schedule_check_passes_on_every_builtin() {
        for b in builtin_specs() {
            let cfg = minimal_config(
                ExperimentKind::ScheduleCheck,
                serde_json::json!(b.id),
            );
            let (payload, passed, _) =
                dispatch(&cfg, b.id, &b.spec, 1).expect("schedule check runs");
            assert!(passed, "schedule inequality must hold for {}", b.id);
            match payload {
                RunPayload::ScheduleCheck(p) => {
                    assert!(
                        p.max_margin <= SCHEDULE_TOLERANCE,
                        "max margin {} exceeds tolerance on {}",
                        p.max_margin,
                        b.id
                    );
                }
                _ => panic!("schedule-check produces a schedule payload"),
            }
        }
    }

    #[test]
    fn run_writes_deterministic_artifacts() {
        let dir = std::env::temp_dir().join(format!("couplex-cli-test-{}", std::process::id()));
        let mut cfg = minimal_config(
            ExperimentKind::VerifyCorollary,
            serde_json::json!("classical-const"),
        );
        cfg.solver = Some(SolverParams {
            n_paths: 2048,
            n_steps: 8,
            basis_degree: 1,
            picard_iters: 1,
            n_replications: 4,
        });
        cfg.pairs = Some(PairParams {
            base: Some(vec![0.0]),
            n_random: 0,
            levels: 3,
            r0: 0.5,
        });

        let out_a = dir.join("a");
        let out_b = dir.join("b");
        let ra = run(&cfg, 1, Some(&out_a)).expect("first run");
        let rb = run(&cfg, 4, Some(&out_b)).expect("second run");
        assert!(ra.passed && rb.passed, "corollary verification passes");

        for name in ["results.json", "quotients.csv"] {
            let a = std::fs::read(out_a.join(name)).expect("first artifact");
            let b = std::fs::read(out_b.join(name)).expect("second artifact");
            assert_eq!(a, b, "{name} must be byte-identical across worker counts");
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_a.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(
            manifest["outputs"],
            serde_json::json!(["results.json", "quotients.csv"]),
            "manifest lists the result files"
        );
        assert_eq!(manifest["config_hash"], rb.manifest.config_hash);
        let results: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_a.join("results.json")).unwrap())
                .unwrap();
        assert!(
            results["constants"].is_object(),
            "results.json embeds the constants snapshot"
        );

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn kind_sections_are_validated() {
        let spec = get_builtin("classical-const").unwrap();
        // bsde without a solver section.
        let cfg = minimal_config(ExperimentKind::Bsde, serde_json::json!("classical-const"));
        let err = dispatch(&cfg, "x", &spec, 1).unwrap_err().to_string();
        assert!(err.contains("solver"), "error names the missing section: {err}");

        // simulate without y0.
        let cfg = minimal_config(ExperimentKind::Simulate, serde_json::json!("classical-const"));
        let err = dispatch(&cfg, "x", &spec, 1).unwrap_err().to_string();
        assert!(err.contains("y0"), "error names the missing y0: {err}");

        // g-heat on a classical spec fails constants derivation.
        let cfg = minimal_config(ExperimentKind::GHeat, serde_json::json!("classical-const"));
        assert!(
            dispatch(&cfg, "x", &spec, 1).is_err(),
            "g-heat needs an uncertainty set"
        );

        // girsanov on a g-mode spec is rejected with a kind hint.
        let gspec = get_builtin("g-const").unwrap();
        let cfg = minimal_config(ExperimentKind::VerifyGirsanov, serde_json::json!("g-const"));
        let err = dispatch(&cfg, "x", &gspec, 1).unwrap_err().to_string();
        assert!(
            err.contains("classical"),
            "error points at the mode restriction: {err}"
        );

        // verify-main2 without fd or control sections.
        let cfg = minimal_config(ExperimentKind::VerifyMain2, serde_json::json!("g-const"));
        let err = dispatch(&cfg, "x", &gspec, 1).unwrap_err().to_string();
        assert!(
            err.contains("fd") && err.contains("control"),
            "error names both acceptable sections: {err}"
        );
    }
}

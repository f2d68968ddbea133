//! Command-line front end for the experiment runner.
//!
//! Every experiment is described by a JSON config file and executed as
//! `couplex <kind> --config <path>`; the subcommand must match the config's
//! `kind` field so a stale path never silently runs the wrong experiment.
//! Results land in the output directory as `results.json`, a kind-specific
//! CSV, and `manifest.json`.
//!
//! Exit codes: `0` when the run (and its verification check, if any)
//! passed, `2` when a verification check failed, and `1` for configuration
//! or runtime errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use couplex::cli::{self, ExperimentKind};
use couplex::model::ConstantConfig;
use couplex::paths::resolve_workers;

/// Coupling-based verification experiments for gradient bounds of nonlinear
/// diffusion semigroups.
#[derive(Parser)]
#[command(name = "couplex", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every experiment subcommand.
#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; falls back to COUPLEX_WORKERS, then 1.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides the config's `out_dir` (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the coupled pair and report the contraction functional.
    Simulate(RunArgs),
    /// Estimate the semilinear semigroup at a point by regression.
    Bsde(RunArgs),
    /// Evaluate the sublinear semigroup by control search.
    GSemigroup(RunArgs),
    /// Solve the one-dimensional fully nonlinear heat equation.
    GHeat(RunArgs),
    /// Check gradient quotients of the semilinear semigroup against the bound.
    VerifyMain1(RunArgs),
    /// Check gradient quotients of the linear semigroup against the bound.
    VerifyCorollary(RunArgs),
    /// Check gradient quotients of the sublinear semigroup against the bound.
    VerifyMain2(RunArgs),
    /// Check the coupling change-of-measure identity on test functions.
    VerifyGirsanov(RunArgs),
    /// Check the schedule's differential inequality on a (p, t) grid.
    ScheduleCheck(RunArgs),
    /// Print the built-in problem specifications with derived constants.
    ListSpecs,
}

impl Command {
    /// The experiment kind this subcommand runs, with its flags; `None` for
    /// the catalogue listing.
    fn experiment(&self) -> Option<(ExperimentKind, &RunArgs)> {
        match self {
            Command::Simulate(a) => Some((ExperimentKind::Simulate, a)),
            Command::Bsde(a) => Some((ExperimentKind::Bsde, a)),
            Command::GSemigroup(a) => Some((ExperimentKind::GSemigroup, a)),
            Command::GHeat(a) => Some((ExperimentKind::GHeat, a)),
            Command::VerifyMain1(a) => Some((ExperimentKind::VerifyMain1, a)),
            Command::VerifyCorollary(a) => Some((ExperimentKind::VerifyCorollary, a)),
            Command::VerifyMain2(a) => Some((ExperimentKind::VerifyMain2, a)),
            Command::VerifyGirsanov(a) => Some((ExperimentKind::VerifyGirsanov, a)),
            Command::ScheduleCheck(a) => Some((ExperimentKind::ScheduleCheck, a)),
            Command::ListSpecs => None,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Run the chosen subcommand; `Ok(passed)` selects exit code 0 or 2.
fn execute(command: &Command) -> couplex::Result<bool> {
    let Some((kind, args)) = command.experiment() else {
        let entries = cli::list_builtin_specs(&ConstantConfig::default())?;
        print!("{}", cli::render_catalogue(&entries));
        return Ok(true);
    };

    let config = cli::load_config(&args.config)?;
    if config.kind != kind {
        return Err(couplex::Error::Config(format!(
            "config kind `{}` does not match subcommand `{kind}`",
            config.kind
        )));
    }

    let workers = resolve_workers(args.workers);
    let outcome = cli::run(&config, workers, args.out.as_deref())?;
    println!(
        "{kind}: {} ({} ms, workers {}, wrote {} under {})",
        if outcome.passed { "pass" } else { "FAIL" },
        outcome.manifest.timing_ms,
        outcome.manifest.workers,
        outcome
            .outputs
            .iter()
            .filter_map(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(", "),
        outcome.out_dir.display(),
    );
    Ok(outcome.passed)
}

//! Built-in problem catalogue.
//!
//! Five small, fully-specified problems exercise every branch of the
//! estimates: a driver-free constant-coefficient baseline, a semilinear
//! one-dimensional problem with state-dependent diffusion, its
//! two-dimensional cousin, and two uncertainty-set problems (constant and
//! state-dependent sigma). Each can be named in a config file instead of
//! spelling out the full specification inline.

use crate::error::{Error, Result};
use crate::model::field::{
    DriftField, DriverSpec, ProblemSpec, SigmaField, TerminalSpec, UncertaintySet,
};

/// A named catalogue entry.
#[derive(Clone, Debug)]
pub struct BuiltinSpec {
    pub id: &'static str,
    pub summary: &'static str,
    pub spec: ProblemSpec,
}

/// All built-in problems, in catalogue order.
pub fn builtin_specs() -> Vec<BuiltinSpec> {
    vec![
        BuiltinSpec {
            id: "classical-const",
            summary: "d=1 Brownian motion, zero driver, tanh terminal",
            spec: ProblemSpec {
                d: 1,
                sigma: SigmaField::Constant { value: 1.0 },
                b: DriftField::Zero,
                driver: DriverSpec::Zero,
                terminal: TerminalSpec::TanhStep {
                    amplitude: 1.0,
                    scale: 2.0,
                },
                horizon: 1.0,
                gamma: None,
            },
        },
        BuiltinSpec {
            id: "classical-semilinear",
            summary: "d=1 sine-perturbed sigma, contracting drift, sine driver",
            spec: ProblemSpec {
                d: 1,
                sigma: SigmaField::SinePerturbed {
                    base: 1.0,
                    amplitude: 0.1,
                    frequency: vec![1.0],
                },
                b: DriftField::Affine {
                    scale: vec![-0.2],
                    offset: vec![0.0],
                },
                driver: DriverSpec::SineLipschitz {
                    g0: 0.1,
                    k_y: 1.0,
                    l_z: 0.5,
                },
                terminal: TerminalSpec::CosWave {
                    amplitude: 1.0,
                    frequency: 1.0,
                    phase: 0.0,
                },
                horizon: 1.0,
                gamma: None,
            },
        },
        BuiltinSpec {
            id: "classical-2d",
            summary: "d=2 sine-perturbed sigma, linear driver, Gaussian bump terminal",
            spec: ProblemSpec {
                d: 2,
                sigma: SigmaField::SinePerturbed {
                    base: 1.0,
                    amplitude: 0.05,
                    frequency: vec![1.0, 2.0],
                },
                b: DriftField::Affine {
                    scale: vec![-0.1, -0.2],
                    offset: vec![0.0, 0.0],
                },
                driver: DriverSpec::Linear {
                    g0: 0.05,
                    y_coef: 0.3,
                    z_coef: 0.2,
                },
                terminal: TerminalSpec::GaussBump {
                    height: 1.0,
                    width: 1.0,
                    center: vec![0.0, 0.0],
                },
                horizon: 1.0,
                gamma: None,
            },
        },
        BuiltinSpec {
            id: "g-const",
            summary: "d=1 constant sigma under variance band [1, 4], clamped quadratic",
            spec: ProblemSpec {
                d: 1,
                sigma: SigmaField::Constant { value: 1.0 },
                b: DriftField::Zero,
                driver: DriverSpec::Zero,
                terminal: TerminalSpec::QuadClamped {
                    cap: 400.0,
                    negate: false,
                },
                horizon: 1.0,
                gamma: Some(UncertaintySet {
                    lo: 1.0,
                    hi: 4.0,
                    generators: None,
                }),
            },
        },
        BuiltinSpec {
            id: "g-sine",
            summary: "d=1 sine-perturbed sigma under variance band [1, 2.25], tanh terminal",
            spec: ProblemSpec {
                d: 1,
                sigma: SigmaField::SinePerturbed {
                    base: 1.0,
                    amplitude: 0.1,
                    frequency: vec![1.0],
                },
                b: DriftField::Affine {
                    scale: vec![-0.2],
                    offset: vec![0.0],
                },
                driver: DriverSpec::Zero,
                terminal: TerminalSpec::TanhStep {
                    amplitude: 1.0,
                    scale: 1.0,
                },
                horizon: 1.0,
                gamma: Some(UncertaintySet {
                    lo: 1.0,
                    hi: 2.25,
                    generators: None,
                }),
            },
        },
    ]
}

/// Look up a catalogue entry by id.
pub fn get_builtin(id: &str) -> Result<ProblemSpec> {
    builtin_specs()
        .into_iter()
        .find(|b| b.id == id)
        .map(|b| b.spec)
        .ok_or_else(|| {
            let known: Vec<&str> = builtin_specs().iter().map(|b| b.id).collect();
            Error::InvalidSpec(format!(
                "unknown builtin spec '{id}'; known: {}",
                known.join(", ")
            ))
        })
}

//! Coefficient fields, drivers, terminal functions, uncertainty sets, and the
//! assembled problem specification.
//!
//! Design rule: every family is simple enough that its ellipticity bounds,
//! Lipschitz constants, and sup norms are exact closed forms. The toolkit's
//! verification logic quotes these constants inside theorem bounds, so an
//! estimated constant would make a bound check circular.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diffusion coefficient sigma: R^d -> diagonal d x d matrices.
///
/// Only diagonal matrix fields are supported: the coupling needs sigma^{-1}
/// exactly, and for diagonal fields the operator norm of a difference is just
/// the largest coordinate difference, keeping `lipschitz()` exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaField {
    /// sigma(x) = value * I.
    Constant { value: f64 },
    /// sigma(x)_ii = base + amplitude * sin(frequency_i * x_i).
    SinePerturbed {
        base: f64,
        amplitude: f64,
        frequency: Vec<f64>,
    },
}

impl SigmaField {
    /// Diagonal entries of sigma(x) written into `out`.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SigmaField::Constant { value } => out.fill(*value),
            SigmaField::SinePerturbed {
                base,
                amplitude,
                frequency,
            } => {
                for i in 0..x.len() {
                    out[i] = base + amplitude * (frequency[i] * x[i]).sin();
                }
            }
        }
    }

    /// Uniform ellipticity floor lambda_sigma (exact).
    pub fn lower(&self) -> f64 {
        match self {
            SigmaField::Constant { value } => *value,
            SigmaField::SinePerturbed {
                base, amplitude, ..
            } => base - amplitude.abs(),
        }
    }

    /// Spectral ceiling Lambda_sigma (exact).
    pub fn upper(&self) -> f64 {
        match self {
            SigmaField::Constant { value } => *value,
            SigmaField::SinePerturbed {
                base, amplitude, ..
            } => base + amplitude.abs(),
        }
    }

    /// Lipschitz constant in the operator norm (exact):
    /// 0 for constants, amplitude * max_i |frequency_i| for sine perturbations.
    pub fn lipschitz(&self) -> f64 {
        match self {
            SigmaField::Constant { .. } => 0.0,
            SigmaField::SinePerturbed {
                amplitude,
                frequency,
                ..
            } => amplitude.abs() * frequency.iter().fold(0.0f64, |m, f| m.max(f.abs())),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            SigmaField::Constant { value } => {
                if !(value.is_finite() && *value > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "sigma constant must be positive and finite, got {value}"
                    )));
                }
            }
            SigmaField::SinePerturbed {
                base,
                amplitude,
                frequency,
            } => {
                if !(base.is_finite() && amplitude.is_finite() && *amplitude >= 0.0) {
                    return Err(Error::InvalidSpec(
                        "sigma sine amplitude must be finite and non-negative".into(),
                    ));
                }
                if base - amplitude <= 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "sigma loses ellipticity: base {base} - amplitude {amplitude} <= 0"
                    )));
                }
                if frequency.len() != d {
                    return Err(Error::InvalidSpec(format!(
                        "sigma frequency has {} entries, spec dimension is {d}",
                        frequency.len()
                    )));
                }
                if frequency.iter().any(|f| !f.is_finite()) {
                    return Err(Error::InvalidSpec("sigma frequency must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Drift coefficient b: R^d -> R^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftField {
    Zero,
    /// b(x) = value (constant vector).
    Constant { value: Vec<f64> },
    /// b(x)_i = scale_i * x_i + offset_i (diagonal affine map).
    Affine { scale: Vec<f64>, offset: Vec<f64> },
}

impl DriftField {
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            DriftField::Zero => out.fill(0.0),
            DriftField::Constant { value } => out.copy_from_slice(value),
            DriftField::Affine { scale, offset } => {
                for i in 0..x.len() {
                    out[i] = scale[i] * x[i] + offset[i];
                }
            }
        }
    }

    /// Lipschitz constant (exact): operator norm of the diagonal linear part.
    pub fn lipschitz(&self) -> f64 {
        match self {
            DriftField::Zero | DriftField::Constant { .. } => 0.0,
            DriftField::Affine { scale, .. } => {
                scale.iter().fold(0.0f64, |m, s| m.max(s.abs()))
            }
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        let check_len = |v: &Vec<f64>, what: &str| -> Result<()> {
            if v.len() != d {
                return Err(Error::InvalidSpec(format!(
                    "drift {what} has {} entries, spec dimension is {d}",
                    v.len()
                )));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidSpec(format!("drift {what} must be finite")));
            }
            Ok(())
        };
        match self {
            DriftField::Zero => Ok(()),
            DriftField::Constant { value } => check_len(value, "value"),
            DriftField::Affine { scale, offset } => {
                check_len(scale, "scale")?;
                check_len(offset, "offset")
            }
        }
    }
}

/// Driver g(y, z) of the backward equation, Lipschitz with constants
/// K_g in y and L_g in z. The z-dependence of the built-ins goes through the
/// first component z_1, which keeps the vector Lipschitz constant exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverSpec {
    Zero,
    /// g(y, z) = g0 + y_coef * y + z_coef * z_1.
    Linear { g0: f64, y_coef: f64, z_coef: f64 },
    /// g(y, z) = g0 + k_y * sin(y) + l_z * sin(z_1).
    SineLipschitz { g0: f64, k_y: f64, l_z: f64 },
}

impl DriverSpec {
    pub fn is_zero(&self) -> bool {
        matches!(self, DriverSpec::Zero)
    }

    /// g(0, 0).
    pub fn g0(&self) -> f64 {
        match self {
            DriverSpec::Zero => 0.0,
            DriverSpec::Linear { g0, .. } | DriverSpec::SineLipschitz { g0, .. } => *g0,
        }
    }

    /// y-Lipschitz constant K_g (exact).
    pub fn lip_y(&self) -> f64 {
        match self {
            DriverSpec::Zero => 0.0,
            DriverSpec::Linear { y_coef, .. } => y_coef.abs(),
            DriverSpec::SineLipschitz { k_y, .. } => *k_y,
        }
    }

    /// z-Lipschitz constant L_g (exact).
    pub fn lip_z(&self) -> f64 {
        match self {
            DriverSpec::Zero => 0.0,
            DriverSpec::Linear { z_coef, .. } => z_coef.abs(),
            DriverSpec::SineLipschitz { l_z, .. } => *l_z,
        }
    }

    #[inline]
    pub fn eval(&self, y: f64, z: &[f64]) -> f64 {
        match self {
            DriverSpec::Zero => 0.0,
            DriverSpec::Linear { g0, y_coef, z_coef } => g0 + y_coef * y + z_coef * z[0],
            DriverSpec::SineLipschitz { g0, k_y, l_z } => g0 + k_y * y.sin() + l_z * z[0].sin(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DriverSpec::Zero => Ok(()),
            DriverSpec::Linear { g0, y_coef, z_coef } => {
                if ![g0, y_coef, z_coef].iter().all(|c| c.is_finite()) {
                    return Err(Error::InvalidSpec("driver coefficients must be finite".into()));
                }
                Ok(())
            }
            DriverSpec::SineLipschitz { g0, k_y, l_z } => {
                if !(g0.is_finite() && k_y.is_finite() && l_z.is_finite()) {
                    return Err(Error::InvalidSpec("driver coefficients must be finite".into()));
                }
                if *k_y < 0.0 || *l_z < 0.0 {
                    return Err(Error::InvalidSpec(
                        "sine driver Lipschitz coefficients must be non-negative".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Bounded terminal test function phi with exact sup norm and Lipschitz
/// constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    Constant { value: f64 },
    /// phi(x) = amplitude * cos(frequency * x_1 + phase).
    CosWave {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// phi(x) = amplitude * tanh(scale * x_1).
    TanhStep { amplitude: f64, scale: f64 },
    /// phi(x) = height * exp(-|x - center|^2 / (2 width^2)).
    GaussBump {
        height: f64,
        width: f64,
        center: Vec<f64>,
    },
    /// phi(x) = s * min(|x|^2, cap), s = -1 if negate else +1.
    QuadClamped {
        cap: f64,
        #[serde(default)]
        negate: bool,
    },
    /// phi(x) = clamp(slope * x_1, -cap, cap).
    LinearClamped { slope: f64, cap: f64 },
    /// phi(x) = sum of the terms; expresses shifted payoffs (a term may be
    /// constant) and superpositions without new base shapes.
    Sum { terms: Vec<TerminalSpec> },
}

impl TerminalSpec {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TerminalSpec::Constant { value } => *value,
            TerminalSpec::CosWave {
                amplitude,
                frequency,
                phase,
            } => amplitude * (frequency * x[0] + phase).cos(),
            TerminalSpec::TanhStep { amplitude, scale } => amplitude * (scale * x[0]).tanh(),
            TerminalSpec::GaussBump {
                height,
                width,
                center,
            } => {
                let r2: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(xi, ci)| (xi - ci) * (xi - ci))
                    .sum();
                height * (-r2 / (2.0 * width * width)).exp()
            }
            TerminalSpec::QuadClamped { cap, negate } => {
                let r2: f64 = x.iter().map(|xi| xi * xi).sum();
                let v = r2.min(*cap);
                if *negate {
                    -v
                } else {
                    v
                }
            }
            TerminalSpec::LinearClamped { slope, cap } => (slope * x[0]).clamp(-cap, *cap),
            TerminalSpec::Sum { terms } => terms.iter().map(|t| t.eval(x)).sum(),
        }
    }

    /// Pointwise value range over all of space. Exact for the base shapes;
    /// for sums it is the interval enclosure (terms need not peak at a common
    /// point), so the enclosure can be strictly wider than the true range.
    fn range(&self) -> (f64, f64) {
        match self {
            TerminalSpec::Constant { value } => (*value, *value),
            TerminalSpec::CosWave { amplitude, .. } => (-amplitude.abs(), amplitude.abs()),
            TerminalSpec::TanhStep { amplitude, .. } => (-amplitude.abs(), amplitude.abs()),
            TerminalSpec::GaussBump { height, .. } => (height.min(0.0), height.max(0.0)),
            TerminalSpec::QuadClamped { cap, negate } => {
                if *negate {
                    (-*cap, 0.0)
                } else {
                    (0.0, *cap)
                }
            }
            TerminalSpec::LinearClamped { cap, .. } => (-*cap, *cap),
            TerminalSpec::Sum { terms } => terms
                .iter()
                .map(TerminalSpec::range)
                .fold((0.0, 0.0), |(lo, hi), (a, b)| (lo + a, hi + b)),
        }
    }

    /// Sup norm: exact for the base shapes, interval upper bound for sums.
    pub fn sup_norm(&self) -> f64 {
        let (lo, hi) = self.range();
        lo.abs().max(hi.abs())
    }

    /// Lipschitz constant (gradient sup norm): exact for the base shapes,
    /// subadditive upper bound for sums.
    pub fn lipschitz(&self) -> f64 {
        match self {
            TerminalSpec::Constant { .. } => 0.0,
            TerminalSpec::CosWave {
                amplitude,
                frequency,
                ..
            } => (amplitude * frequency).abs(),
            TerminalSpec::TanhStep { amplitude, scale } => (amplitude * scale).abs(),
            // |grad| = h * (r/w^2) e^{-r^2/(2w^2)} peaks at r = w.
            TerminalSpec::GaussBump { height, width, .. } => {
                height.abs() / width.abs() * (-0.5f64).exp()
            }
            TerminalSpec::QuadClamped { cap, .. } => 2.0 * cap.sqrt(),
            TerminalSpec::LinearClamped { slope, .. } => slope.abs(),
            TerminalSpec::Sum { terms } => terms.iter().map(TerminalSpec::lipschitz).sum(),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        let finite = |c: f64, what: &str| -> Result<()> {
            if !c.is_finite() {
                return Err(Error::InvalidSpec(format!("terminal {what} must be finite")));
            }
            Ok(())
        };
        match self {
            TerminalSpec::Constant { value } => finite(*value, "value"),
            TerminalSpec::CosWave {
                amplitude,
                frequency,
                phase,
            } => {
                finite(*amplitude, "amplitude")?;
                finite(*frequency, "frequency")?;
                finite(*phase, "phase")
            }
            TerminalSpec::TanhStep { amplitude, scale } => {
                finite(*amplitude, "amplitude")?;
                finite(*scale, "scale")
            }
            TerminalSpec::GaussBump {
                height,
                width,
                center,
            } => {
                finite(*height, "height")?;
                if !(width.is_finite() && *width > 0.0) {
                    return Err(Error::InvalidSpec("terminal width must be positive".into()));
                }
                if center.len() != d {
                    return Err(Error::InvalidSpec(format!(
                        "terminal center has {} entries, spec dimension is {d}",
                        center.len()
                    )));
                }
                Ok(())
            }
            TerminalSpec::QuadClamped { cap, .. } => {
                if !(cap.is_finite() && *cap > 0.0) {
                    return Err(Error::InvalidSpec("terminal cap must be positive".into()));
                }
                Ok(())
            }
            TerminalSpec::LinearClamped { slope, cap } => {
                finite(*slope, "slope")?;
                if !(cap.is_finite() && *cap > 0.0) {
                    return Err(Error::InvalidSpec("terminal cap must be positive".into()));
                }
                Ok(())
            }
            TerminalSpec::Sum { terms } => {
                if terms.is_empty() {
                    return Err(Error::InvalidSpec(
                        "terminal sum needs at least one term".into(),
                    ));
                }
                terms.iter().try_for_each(|t| t.validate(d))
            }
        }
    }
}

/// Volatility uncertainty set Gamma, in variance units: spectral bounds
/// [lo, hi] = [lambda_Gamma^2, Lambda_Gamma^2] plus an optional finite
/// generating list of diagonal matrices (their diagonal entries). When absent,
/// the generators default to {lo * I, hi * I}, the extreme points used by the
/// control search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySet {
    pub lo: f64,
    pub hi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generators: Option<Vec<Vec<f64>>>,
}

impl UncertaintySet {
    /// lambda_Gamma (volatility units).
    pub fn gamma_min(&self) -> f64 {
        self.lo.sqrt()
    }

    /// Lambda_Gamma (volatility units).
    pub fn gamma_max(&self) -> f64 {
        self.hi.sqrt()
    }

    pub fn beta(&self) -> f64 {
        (self.hi / self.lo).sqrt()
    }

    /// Generating list as diagonal vectors of length d.
    pub fn generator_diags(&self, d: usize) -> Vec<Vec<f64>> {
        match &self.generators {
            Some(g) => g.clone(),
            None => vec![vec![self.lo; d], vec![self.hi; d]],
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo > 0.0 && self.hi >= self.lo) {
            return Err(Error::InvalidSpec(format!(
                "uncertainty set needs 0 < lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if let Some(generators) = &self.generators {
            if generators.is_empty() {
                return Err(Error::InvalidSpec("generator list must be non-empty".into()));
            }
            for (i, g) in generators.iter().enumerate() {
                if g.len() != d {
                    return Err(Error::InvalidSpec(format!(
                        "generator {i} has {} entries, spec dimension is {d}",
                        g.len()
                    )));
                }
                if g.iter().any(|v| *v < self.lo || *v > self.hi || !v.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "generator {i} leaves the spectral bounds [{}, {}]",
                        self.lo, self.hi
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A complete problem description. Presence of `gamma` switches the toolkit
/// into the sublinear-expectation mode (no driver allowed there: that mode's
/// semigroup is driven by volatility uncertainty alone).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub d: usize,
    pub sigma: SigmaField,
    pub b: DriftField,
    pub driver: DriverSpec,
    pub terminal: TerminalSpec,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<UncertaintySet>,
}

impl ProblemSpec {
    pub fn is_g_mode(&self) -> bool {
        self.gamma.is_some()
    }

    /// Structural validation; every entry point that accepts external specs
    /// calls this before using one.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidSpec("dimension must be at least 1".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "horizon T must be positive and finite, got {}",
                self.horizon
            )));
        }
        self.sigma.validate(self.d)?;
        self.b.validate(self.d)?;
        self.driver.validate()?;
        self.terminal.validate(self.d)?;
        if let Some(gamma) = &self.gamma {
            gamma.validate(self.d)?;
            if !self.driver.is_zero() {
                return Err(Error::InvalidSpec(
                    "uncertainty-set mode requires a zero driver".into(),
                ));
            }
        }
        Ok(())
    }

    // Convenience accessors used throughout the crate.

    pub fn sigma_min(&self) -> f64 {
        self.sigma.lower()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.upper()
    }

    pub fn phi(&self, x: &[f64]) -> f64 {
        self.terminal.eval(x)
    }
}

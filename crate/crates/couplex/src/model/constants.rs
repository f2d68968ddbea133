//! Derivation of every constant entering the three gradient bounds.
//!
//! Classical mode (driver present or absent, no uncertainty set), with
//! beta_sigma = Lambda_sigma / lambda_sigma and exponent alpha > 2:
//!
//! ```text
//! theta   = lambda_sigma^2 / (2 Lambda_sigma)
//! L^g_p   = L_g L_sigma + L_b + (p - 1/2) L_sigma^2        (p = alpha/2)
//! L       = 2 L^g_{alpha/2}                       (driver-free: L_g = 0)
//! mu      = K_g + 4 L_g^2
//! delta   = 1 / (16 beta_sigma^6 + 8 beta_sigma^3)
//! C_alpha = c_{alpha/2}^{2/alpha} (1/alpha)^{1/alpha}
//!           ((alpha-1)/alpha)^{(alpha-1)/alpha}
//! C_beta  = d_{32 (beta_sigma^3 + 1/4)^2} / sqrt(2) + 1
//! C_g     = 1 + K_g / L_g^2                        (needs L_g > 0)
//! C       = 4 C_alpha C_beta C_g Lambda_sigma^2 / lambda_sigma^3
//! ```
//!
//! and the full-bound slope is `C (||phi|| + |g0|/mu) e^{mu T} / sqrt(xi0^base)`
//! with `xi0^base = (1 - e^{-LT}) / L`. The driver-free corollary drops the
//! C_g and mu factors. Uncertainty mode replaces the constant by
//! `C = 2 Lambda_sigma^2 / (lambda_sigma^3 lambda_Gamma)` with rate
//! `L = 2 L_b + Lambda_Gamma^2 L_sigma^2` and
//! `delta = theta^2 / (4 Lambda_sigma^2 beta^2 + 4 theta Lambda_sigma beta)`,
//! `beta = beta_sigma beta_Gamma`.
//!
//! The moment constants c_p and d_p are not pinned down by the theory; they are
//! configuration with documented defaults (c_p = 4, d_p = 2^p) and are echoed
//! into every report so a bound check is always relative to stated values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::field::ProblemSpec;

/// Which gradient bound the constants serve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantsMode {
    /// Semilinear bound (driver present).
    Main1,
    /// Driver-free classical bound.
    Corollary,
    /// Uncertainty-set (sublinear expectation) bound.
    Main2,
}

impl std::fmt::Display for ConstantsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstantsMode::Main1 => write!(f, "main1"),
            ConstantsMode::Corollary => write!(f, "corollary"),
            ConstantsMode::Main2 => write!(f, "main2"),
        }
    }
}

/// Configurable moment constants and the classical exponent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantConfig {
    /// Classical exponent alpha (> 2); the route exponent is p = alpha/2.
    pub alpha: f64,
    /// Fallback c_p for exponents without an explicit override.
    pub c_bdg: f64,
    /// Explicit (p, c_p) overrides.
    pub c_overrides: Vec<(f64, f64)>,
    /// Base of d_p = d_base^p.
    pub d_base: f64,
    /// Explicit (p, d_p) overrides.
    pub d_overrides: Vec<(f64, f64)>,
    /// Constant d_1 used by the backward-solver a-priori check.
    pub d1: f64,
    /// Uncertainty-mode schedule level theta; defaults to
    /// lambda_sigma^2 Lambda_sigma^{-1} / 2 when absent.
    pub theta_g: Option<f64>,
}

impl Default for ConstantConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            c_bdg: 4.0,
            c_overrides: Vec::new(),
            d_base: 2.0,
            d_overrides: Vec::new(),
            d1: 2.0,
            theta_g: None,
        }
    }
}

impl ConstantConfig {
    /// c_p at exponent `p`: exact-match override or the fallback.
    pub fn c_p(&self, p: f64) -> f64 {
        self.c_overrides
            .iter()
            .find(|(q, _)| (q - p).abs() <= 1e-12)
            .map_or(self.c_bdg, |(_, c)| *c)
    }

    /// d_p at exponent `p`: exact-match override or d_base^p.
    pub fn d_p(&self, p: f64) -> f64 {
        self.d_overrides
            .iter()
            .find(|(q, _)| (q - p).abs() <= 1e-12)
            .map_or_else(|| self.d_base.powf(p), |(_, d)| *d)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 2.0) {
            return Err(Error::InvalidParam {
                name: "alpha",
                message: format!("must be > 2, got {}", self.alpha),
            });
        }
        if !(self.c_bdg > 0.0 && self.d_base > 0.0 && self.d1 > 0.0) {
            return Err(Error::InvalidParam {
                name: "constants",
                message: "c_bdg, d_base, d1 must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Every constant of the selected bound, plus the hypothesis constants they
/// were derived from. Serialized verbatim into reports and results files.
#[derive(Clone, Debug, Serialize)]
pub struct DerivedConstants {
    pub mode: ConstantsMode,
    pub d: usize,
    pub horizon: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub beta_sigma: f64,
    pub lip_sigma: f64,
    pub lip_b: f64,
    pub lip_g_y: f64,
    pub lip_g_z: f64,
    pub g0: f64,
    pub phi_sup: f64,
    pub phi_lip: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Schedule level theta.
    pub theta: f64,
    /// Schedule/bound rate L (1/time).
    pub rate: f64,
    /// Growth exponent mu = K_g + 4 L_g^2 (0 outside the semilinear bound).
    pub mu: f64,
    /// Density-moment exponent delta.
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_g: Option<f64>,
    /// Exponent fed to d_p (classical modes).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_subscript: Option<f64>,
    /// d_p value actually used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_value: Option<f64>,
    /// c_p value actually used (at p = alpha/2).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_value: Option<f64>,
    /// Front constant C of the selected bound.
    pub bound_c: f64,
    /// Schedule amplitude: xi_t = xi_amp * (1 - e^{L(t-T)}) / L.
    pub xi_amp: f64,
    /// xi at t = 0.
    pub xi0: f64,
    /// Unscaled schedule value (1 - e^{-LT}) / L (the L -> 0 limit is T).
    pub xi0_base: f64,
    /// Configuration snapshot the constants were derived under.
    pub config: ConstantConfig,
}

/// (1 - e^{-L T}) / L with the analytic L -> 0 limit T.
pub(crate) fn xi_base(rate: f64, horizon: f64) -> f64 {
    if rate == 0.0 {
        horizon
    } else {
        -(-rate * horizon).exp_m1() / rate
    }
}

/// Derive the constants of the `mode` bound for `spec` under `config`.
pub fn derive_constants(
    spec: &ProblemSpec,
    mode: ConstantsMode,
    config: &ConstantConfig,
) -> Result<DerivedConstants> {
    spec.validate()?;
    config.validate()?;

    let sigma_min = spec.sigma.lower();
    let sigma_max = spec.sigma.upper();
    let beta_sigma = sigma_max / sigma_min;
    let lip_sigma = spec.sigma.lipschitz();
    let lip_b = spec.b.lipschitz();
    let lip_g_y = spec.driver.lip_y();
    let lip_g_z = spec.driver.lip_z();
    let g0 = spec.driver.g0();
    let alpha = config.alpha;

    let mut consts = DerivedConstants {
        mode,
        d: spec.d,
        horizon: spec.horizon,
        sigma_min,
        sigma_max,
        beta_sigma,
        lip_sigma,
        lip_b,
        lip_g_y,
        lip_g_z,
        g0,
        phi_sup: spec.terminal.sup_norm(),
        phi_lip: spec.terminal.lipschitz(),
        gamma_min: None,
        gamma_max: None,
        beta_gamma: None,
        alpha: None,
        theta: 0.0,
        rate: 0.0,
        mu: 0.0,
        delta: 0.0,
        c_alpha: None,
        c_beta: None,
        c_g: None,
        d_subscript: None,
        d_value: None,
        c_value: None,
        bound_c: 0.0,
        xi_amp: 0.0,
        xi0: 0.0,
        xi0_base: 0.0,
        config: config.clone(),
    };

    match mode {
        ConstantsMode::Main1 | ConstantsMode::Corollary => {
            if spec.is_g_mode() {
                return Err(Error::InvalidSpec(
                    "classical bounds require a spec without an uncertainty set".into(),
                ));
            }
            if mode == ConstantsMode::Main1 {
                if spec.driver.is_zero() {
                    return Err(Error::InvalidSpec(
                        "the semilinear bound needs a nonzero driver; use the corollary mode"
                            .into(),
                    ));
                }
                if lip_g_z == 0.0 {
                    // Covers in particular K_g > 0 with L_g = 0, where C_g is
                    // undefined.
                    return Err(Error::InvalidSpec(
                        "the semilinear bound requires L_g > 0 (C_g = 1 + K_g/L_g^2)".into(),
                    ));
                }
            } else if !spec.driver.is_zero() {
                return Err(Error::InvalidSpec(
                    "the corollary mode requires a zero driver".into(),
                ));
            }

            let theta = sigma_min * sigma_min / (2.0 * sigma_max);
            let p = alpha / 2.0;
            let lpg = lip_g_z * lip_sigma + lip_b + (p - 0.5) * lip_sigma * lip_sigma;
            let rate = 2.0 * lpg;
            let mu = lip_g_y + 4.0 * lip_g_z * lip_g_z;
            let delta = 1.0 / (16.0 * beta_sigma.powi(6) + 8.0 * beta_sigma.powi(3));
            let c_value = config.c_p(p);
            let conj = (alpha - 1.0) / alpha;
            let c_alpha = c_value.powf(2.0 / alpha) * (1.0 / alpha).powf(1.0 / alpha)
                * conj.powf(conj);
            let d_subscript = 32.0 * (beta_sigma.powi(3) + 0.25).powi(2);
            let d_value = config.d_p(d_subscript);
            let c_beta = d_value / std::f64::consts::SQRT_2 + 1.0;
            let c_g = if mode == ConstantsMode::Main1 {
                1.0 + lip_g_y / (lip_g_z * lip_g_z)
            } else {
                1.0
            };
            let bound_c =
                4.0 * c_alpha * c_beta * c_g * sigma_max * sigma_max / sigma_min.powi(3);
            let xi_amp = alpha / (alpha - 1.0) * theta;
            let xi0_base = xi_base(rate, spec.horizon);

            consts.alpha = Some(alpha);
            consts.theta = theta;
            consts.rate = rate;
            consts.mu = if mode == ConstantsMode::Main1 { mu } else { 0.0 };
            consts.delta = delta;
            consts.c_alpha = Some(c_alpha);
            consts.c_beta = Some(c_beta);
            consts.c_g = Some(c_g);
            consts.d_subscript = Some(d_subscript);
            consts.d_value = Some(d_value);
            consts.c_value = Some(c_value);
            consts.bound_c = bound_c;
            consts.xi_amp = xi_amp;
            consts.xi0 = xi_amp * xi0_base;
            consts.xi0_base = xi0_base;
        }
        ConstantsMode::Main2 => {
            let gamma = spec.gamma.as_ref().ok_or_else(|| {
                Error::InvalidSpec("the uncertainty bound requires a gamma set".into())
            })?;
            let gamma_min = gamma.gamma_min();
            let gamma_max = gamma.gamma_max();
            let beta_gamma = gamma.beta();
            let theta_cap = sigma_min * sigma_min / sigma_max;
            let theta = config.theta_g.unwrap_or(0.5 * theta_cap);
            if !(theta >= 0.5 * theta_cap && theta < theta_cap) {
                return Err(Error::InvalidParam {
                    name: "theta_g",
                    message: format!(
                        "must lie in [{}, {}), got {theta}",
                        0.5 * theta_cap,
                        theta_cap
                    ),
                });
            }
            let rate = 2.0 * lip_b + gamma_max * gamma_max * lip_sigma * lip_sigma;
            let beta = beta_sigma * beta_gamma;
            let delta = theta * theta
                / (4.0 * sigma_max * sigma_max * beta * beta + 4.0 * theta * sigma_max * beta);
            let bound_c = 2.0 * sigma_max * sigma_max / (sigma_min.powi(3) * gamma_min);
            let xi_amp = 2.0 * (theta_cap - theta);
            let xi0_base = xi_base(rate, spec.horizon);

            consts.gamma_min = Some(gamma_min);
            consts.gamma_max = Some(gamma_max);
            consts.beta_gamma = Some(beta_gamma);
            consts.theta = theta;
            consts.rate = rate;
            consts.delta = delta;
            consts.bound_c = bound_c;
            consts.xi_amp = xi_amp;
            consts.xi0 = xi_amp * xi0_base;
            consts.xi0_base = xi0_base;
        }
    }
    Ok(consts)
}

/// The linear-in-separation bound r -> slope * r of the selected estimate.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoundLine {
    pub slope: f64,
}

impl BoundLine {
    pub fn eval(&self, r: f64) -> f64 {
        self.slope * r
    }
}

/// Assemble the gradient-bound line from derived constants. The mode is the
/// one the constants were derived in.
pub fn theorem_bound(consts: &DerivedConstants) -> BoundLine {
    let denom = consts.xi0_base.sqrt();
    let slope = match consts.mode {
        ConstantsMode::Main1 => {
            consts.bound_c * (consts.phi_sup + consts.g0.abs() / consts.mu)
                * (consts.mu * consts.horizon).exp()
                / denom
        }
        ConstantsMode::Corollary | ConstantsMode::Main2 => {
            consts.bound_c * consts.phi_sup / denom
        }
    };
    BoundLine { slope }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::field::{
        DriftField, DriverSpec, SigmaField, TerminalSpec, UncertaintySet,
    };
    use crate::paths::RngStream;

    fn classical_spec(driver: DriverSpec) -> ProblemSpec {
        ProblemSpec {
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
            driver,
            terminal: TerminalSpec::CosWave {
                amplitude: 1.0,
                frequency: 1.0,
                phase: 0.0,
            },
            horizon: 1.0,
            gamma: None,
        }
    }

    fn semilinear_driver() -> DriverSpec {
        DriverSpec::SineLipschitz {
            g0: 0.1,
            k_y: 1.0,
            l_z: 0.5,
        }
    }

    #[test]
    fn delta_at_unit_condition_number() {
        let spec = ProblemSpec {
            d: 1,
            sigma: SigmaField::Constant { value: 1.0 },
            b: DriftField::Zero,
            driver: DriverSpec::Zero,
            terminal: TerminalSpec::Constant { value: 1.0 },
            horizon: 1.0,
            gamma: None,
        };
        let c = derive_constants(&spec, ConstantsMode::Corollary, &ConstantConfig::default())
            .unwrap();
        assert!(
            (c.delta - 1.0 / 24.0).abs() < 1e-15,
            "beta = 1 gives delta = 1/24, got {}",
            c.delta
        );
    }

    #[test]
    fn delta_formula_identity_over_random_ellipticity() {
        // theta^2/(4 Lambda^2 beta^2 + 4 theta Lambda beta) collapses to
        // 1/(16 beta^6 + 8 beta^3) once theta = lambda^2/(2 Lambda).
        let rng = RngStream::new(31, 0);
        for case in 0..100u64 {
            let (u1, u2) = rng.normal_pair(case, 0, 0);
            let lambda = 0.2 + 2.0 * u1.abs().min(3.0);
            let cap = lambda * (1.0 + u2.abs().min(4.0));
            let beta: f64 = cap / lambda;
            let theta = lambda * lambda / (2.0 * cap);
            let direct = theta * theta / (4.0 * cap * cap * beta * beta + 4.0 * theta * cap * beta);
            let closed = 1.0 / (16.0 * beta.powi(6) + 8.0 * beta.powi(3));
            assert!(
                (direct - closed).abs() <= 1e-12 * closed,
                "delta identity broke at lambda={lambda}, Lambda={cap}"
            );
        }
    }

    #[test]
    fn frozen_constant_values() {
        let c = derive_constants(
            &classical_spec(semilinear_driver()),
            ConstantsMode::Main1,
            &ConstantConfig::default(),
        )
        .unwrap();
        // C_alpha at alpha = 5, c_{5/2} = 4: 4^{2/5} (1/5)^{1/5} (4/5)^{4/5}.
        assert!(
            (c.c_alpha.unwrap() - 1.05560).abs() < 5e-5,
            "C_alpha = {}",
            c.c_alpha.unwrap()
        );
        assert!((c.mu - 2.0).abs() < 1e-15, "mu = K_g + 4 L_g^2 = 2");
        assert!(
            (c.rate - 0.54).abs() < 1e-15,
            "L = 2(0.05 + 0.2 + 2*0.01) = 0.54, got {}",
            c.rate
        );
        assert!((c.c_g.unwrap() - 5.0).abs() < 1e-12, "C_g = 1 + 1/0.25");
        assert!((c.theta - 0.81 / 2.2).abs() < 1e-15);
        // d subscript 32 (beta^3 + 1/4)^2 at beta = 11/9.
        let beta: f64 = 1.1 / 0.9;
        let expect_sub = 32.0 * (beta.powi(3) + 0.25).powi(2);
        assert!((c.d_subscript.unwrap() - expect_sub).abs() < 1e-12);
        assert!(c.bound_c.is_finite() && c.bound_c > 0.0);
    }

    #[test]
    fn main2_constant_and_bound_slope() {
        let spec = ProblemSpec {
            d: 1,
            sigma: SigmaField::Constant { value: 1.0 },
            b: DriftField::Affine {
                scale: vec![-0.5],
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
                hi: 1.0,
                generators: None,
            }),
        };
        let c = derive_constants(&spec, ConstantsMode::Main2, &ConstantConfig::default()).unwrap();
        assert!((c.bound_c - 2.0).abs() < 1e-15, "C = 2 Lambda^2/(lambda^3 lambda_Gamma)");
        assert!((c.rate - 1.0).abs() < 1e-15, "L = 2 L_b = 1");
        let slope = theorem_bound(&c).slope;
        assert!(
            (slope - 2.515533).abs() < 5e-6,
            "main2 slope 2/sqrt(1 - e^-1) = 2.515533, got {slope}"
        );
    }

    #[test]
    fn rate_zero_limit_uses_horizon() {
        let spec = ProblemSpec {
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
        };
        let c = derive_constants(&spec, ConstantsMode::Corollary, &ConstantConfig::default())
            .unwrap();
        assert_eq!(c.rate, 0.0, "constant sigma, zero drift");
        assert_eq!(c.xi0_base, 1.0, "(1 - e^{{-LT}})/L -> T");
        let slope = theorem_bound(&c).slope;
        assert!((slope - c.bound_c * c.phi_sup).abs() < 1e-12, "denominator sqrt(T) = 1");
    }

    #[test]
    fn semilinear_bound_collapses_to_corollary_as_driver_vanishes() {
        // K_g = 0 and L_g -> 0: C_g -> 1, mu -> 0, L -> corollary rate, so the
        // semilinear slope converges to the driver-free slope.
        let driver = DriverSpec::Linear {
            g0: 0.0,
            y_coef: 0.0,
            z_coef: 1e-7,
        };
        let with_driver = derive_constants(
            &classical_spec(driver),
            ConstantsMode::Main1,
            &ConstantConfig::default(),
        )
        .unwrap();
        let without = derive_constants(
            &classical_spec(DriverSpec::Zero),
            ConstantsMode::Corollary,
            &ConstantConfig::default(),
        )
        .unwrap();
        let s1 = theorem_bound(&with_driver).slope;
        let s0 = theorem_bound(&without).slope;
        assert!(
            ((s1 - s0) / s0).abs() < 1e-5,
            "limit slope {s1} should approach corollary slope {s0}"
        );
    }

    #[test]
    fn invalid_mode_spec_combinations_error() {
        // K_g > 0 with L_g = 0 leaves C_g undefined.
        let bad = DriverSpec::Linear {
            g0: 0.0,
            y_coef: 1.0,
            z_coef: 0.0,
        };
        assert!(matches!(
            derive_constants(
                &classical_spec(bad),
                ConstantsMode::Main1,
                &ConstantConfig::default()
            ),
            Err(Error::InvalidSpec(_))
        ));
        // Semilinear mode rejects a zero driver outright.
        assert!(derive_constants(
            &classical_spec(DriverSpec::Zero),
            ConstantsMode::Main1,
            &ConstantConfig::default()
        )
        .is_err());
        // Corollary rejects a nonzero driver.
        assert!(derive_constants(
            &classical_spec(semilinear_driver()),
            ConstantsMode::Corollary,
            &ConstantConfig::default()
        )
        .is_err());
        // Uncertainty mode without a gamma set.
        assert!(derive_constants(
            &classical_spec(DriverSpec::Zero),
            ConstantsMode::Main2,
            &ConstantConfig::default()
        )
        .is_err());
    }

    #[test]
    fn config_overrides_are_honored() {
        let config = ConstantConfig {
            c_overrides: vec![(2.5, 9.0)],
            d_overrides: vec![(50.0, 123.0)],
            ..ConstantConfig::default()
        };
        assert_eq!(config.c_p(2.5), 9.0);
        assert_eq!(config.c_p(3.0), 4.0, "fallback");
        assert_eq!(config.d_p(50.0), 123.0);
        assert_eq!(config.d_p(3.0), 8.0, "2^3");
    }
}

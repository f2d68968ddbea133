//! Shared report types and small fitting utilities.
//!
//! Estimators in this crate report batch-mean statistics, and the gradient
//! harness extrapolates finite-separation quotients to zero separation with
//! a weighted least-squares line. Both live here so every module reports in
//! the same shape.

use serde::Serialize;

use crate::error::{Error, Result};

/// A Monte Carlo estimate with a batch-means standard error.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MomentReport {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: u64,
    pub n_batches: u32,
}

impl MomentReport {
    /// Combine batch means (equal batch sizes) into mean and stderr of the
    /// overall mean.
    pub fn from_batch_means(batch_means: &[f64], samples_per_batch: u64) -> Result<Self> {
        let b = batch_means.len();
        if b < 2 {
            return Err(Error::InvalidParam {
                name: "batches",
                message: format!("need at least 2 batches, got {b}"),
            });
        }
        let mean = batch_means.iter().sum::<f64>() / b as f64;
        let var = batch_means
            .iter()
            .map(|m| (m - mean) * (m - mean))
            .sum::<f64>()
            / (b as f64 - 1.0);
        Ok(Self {
            mean,
            stderr: (var / b as f64).sqrt(),
            n_samples: samples_per_batch * b as u64,
            n_batches: b as u32,
        })
    }
}

/// Weighted least-squares fit of y = a + b x.
///
/// Weights are 1/sigma_i^2. Returns (a, b, stderr_a, chi2/dof); when the fit
/// is poor (reduced chi2 > 1) the intercept error is widened by
/// sqrt(chi2/dof) so an underestimated model error cannot shrink the band.
pub fn wls_line(xs: &[f64], ys: &[f64], sigmas: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let n = xs.len();
    if n < 3 || ys.len() != n || sigmas.len() != n {
        return Err(Error::InvalidParam {
            name: "fit",
            message: format!("need >= 3 equal-length points, got {n}"),
        });
    }
    let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        if sigmas[i] <= 0.0 || sigmas[i].is_nan() {
            return Err(Error::InvalidParam {
                name: "fit",
                message: format!("nonpositive sigma at point {i}"),
            });
        }
        let w = 1.0 / (sigmas[i] * sigmas[i]);
        sw += w;
        swx += w * xs[i];
        swy += w * ys[i];
        swxx += w * xs[i] * xs[i];
        swxy += w * xs[i] * ys[i];
    }
    let det = sw * swxx - swx * swx;
    if det.abs() < 1e-300 {
        return Err(Error::InvalidParam {
            name: "fit",
            message: "degenerate abscissae".into(),
        });
    }
    let a = (swxx * swy - swx * swxy) / det;
    let b = (sw * swxy - swx * swy) / det;
    let var_a = swxx / det;
    let mut chi2 = 0.0;
    for i in 0..n {
        let r = (ys[i] - a - b * xs[i]) / sigmas[i];
        chi2 += r * r;
    }
    let dof = (n - 2) as f64;
    let red = chi2 / dof;
    let stderr_a = (var_a * red.max(1.0)).sqrt();
    Ok((a, b, stderr_a, red))
}

/// Weighted least-squares fit of y = a x + b x^2 (through the origin).
///
/// Returns (a, b, stderr_a, chi2/dof) with the same variance-widening rule
/// as [`wls_line`]. Used where the quantity is exactly zero at x = 0 and the
/// leading coefficient is the object of interest.
pub fn wls_origin_quadratic(
    xs: &[f64],
    ys: &[f64],
    sigmas: &[f64],
) -> Result<(f64, f64, f64, f64)> {
    let n = xs.len();
    if n < 3 || ys.len() != n || sigmas.len() != n {
        return Err(Error::InvalidParam {
            name: "fit",
            message: format!("need >= 3 equal-length points, got {n}"),
        });
    }
    // Normal equations in the basis (x, x^2).
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        if sigmas[i] <= 0.0 || sigmas[i].is_nan() {
            return Err(Error::InvalidParam {
                name: "fit",
                message: format!("nonpositive sigma at point {i}"),
            });
        }
        let w = 1.0 / (sigmas[i] * sigmas[i]);
        let (x, x2) = (xs[i], xs[i] * xs[i]);
        s11 += w * x * x;
        s12 += w * x * x2;
        s22 += w * x2 * x2;
        b1 += w * x * ys[i];
        b2 += w * x2 * ys[i];
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() < 1e-300 {
        return Err(Error::InvalidParam {
            name: "fit",
            message: "degenerate abscissae".into(),
        });
    }
    let a = (s22 * b1 - s12 * b2) / det;
    let b = (s11 * b2 - s12 * b1) / det;
    let var_a = s22 / det;
    let mut chi2 = 0.0;
    for i in 0..n {
        let r = (ys[i] - a * xs[i] - b * xs[i] * xs[i]) / sigmas[i];
        chi2 += r * r;
    }
    let dof = (n - 2) as f64;
    let red = chi2 / dof;
    let stderr_a = (var_a * red.max(1.0)).sqrt();
    Ok((a, b, stderr_a, red))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::RngStream;

    #[test]
    fn batch_means_recover_mean_and_spread() {
        let means = [1.0, 1.2, 0.8, 1.1, 0.9];
        let r = MomentReport::from_batch_means(&means, 100).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-15);
        assert_eq!(r.n_samples, 500);
        // Sample variance of the batch means is 0.025; stderr = sqrt(0.025/5).
        assert!((r.stderr - (0.025f64 / 5.0).sqrt()).abs() < 1e-12);
        assert!(MomentReport::from_batch_means(&[1.0], 10).is_err());
    }

    #[test]
    fn line_fit_recovers_exact_coefficients() {
        let xs = [0.1, 0.2, 0.3, 0.4];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x).collect();
        let sig = [0.01; 4];
        let (a, b, se_a, red) = wls_line(&xs, &ys, &sig).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 3.0).abs() < 1e-12);
        assert!(se_a > 0.0 && red < 1e-12);
    }

    #[test]
    fn line_fit_covers_noisy_intercept() {
        // Synthetic y = 1.7 x + noise(0.01): intercept band should include 0
        // and slope estimate should land near 1.7.
        let rng = RngStream::new(7, 0);
        let xs: Vec<f64> = (1..=8).map(|k| 0.05 * k as f64).collect();
        let mut ys = Vec::new();
        for (i, &x) in xs.iter().enumerate() {
            let (z, _) = rng.normal_pair(i as u64, 0, 0);
            ys.push(1.7 * x + 0.01 * z);
        }
        let sig = vec![0.01; xs.len()];
        let (a, b, se_a, _) = wls_line(&xs, &ys, &sig).unwrap();
        assert!(a.abs() < 4.0 * se_a, "intercept {a} inconsistent with 0 (se {se_a})");
        assert!((b - 1.7).abs() < 0.1);
    }

    #[test]
    fn origin_quadratic_recovers_slope() {
        let xs = [0.05, 0.1, 0.2, 0.4];
        let ys: Vec<f64> = xs.iter().map(|x| 1.7 * x - 0.3 * x * x).collect();
        let sig = [1e-6; 4];
        let (a, b, se_a, _) = wls_origin_quadratic(&xs, &ys, &sig).unwrap();
        assert!((a - 1.7).abs() < 1e-9, "slope {a}");
        assert!((b + 0.3).abs() < 1e-8, "curvature {b}");
        assert!(se_a < 1e-4);
    }

    #[test]
    fn poor_fit_widens_the_band() {
        // Same data, sigmas understated by 10x: reduced chi2 ~ 100 and the
        // intercept error should widen ~10x rather than stay at the naive
        // propagated value.
        let rng = RngStream::new(11, 0);
        let xs: Vec<f64> = (1..=10).map(|k| 0.1 * k as f64).collect();
        let mut ys = Vec::new();
        for (i, &x) in xs.iter().enumerate() {
            let (z, _) = rng.normal_pair(i as u64, 0, 0);
            ys.push(0.5 + 2.0 * x + 0.1 * z);
        }
        let honest = vec![0.1; xs.len()];
        let lying = vec![0.01; xs.len()];
        let (_, _, se_honest, red_h) = wls_line(&xs, &ys, &honest).unwrap();
        let (_, _, se_lying, red_l) = wls_line(&xs, &ys, &lying).unwrap();
        assert!((red_l - 100.0 * red_h).abs() < 1e-9 * red_l, "chi2 scales with 1/sigma^2");
        // Naive propagation would report se_honest/10; widening must undo
        // most of the understatement (exactly sqrt(red_h) of the honest band).
        assert!(
            se_lying > 4.0 * se_honest / 10.0,
            "widened band {se_lying} vs naive understated band {}",
            se_honest / 10.0
        );
        assert!(
            (se_lying - se_honest * red_h.sqrt()).abs() < 1e-9,
            "widening rule: se = naive * sqrt(red)"
        );
    }
}

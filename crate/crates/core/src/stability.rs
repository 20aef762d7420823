//! Second-moment stability of SGD around the two minimizers of the quadratic
//! example.
//!
//! Near `theta* = -1` only group 0 has curvature, near `+1` only group 1. One
//! step multiplies `theta - theta*` by `1 - eta W`, where `W` is the drawn
//! group's weight if that group owns the well and zero otherwise. The
//! expected square of that multiplier is the stability factor.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::histogram::HistogramSpec;
use crate::loss::{GroupedLoss1D, Proportions};
use crate::sampler::Scheme;
use crate::sgd::{run_ensemble, Dynamics, SgdConfig};

/// Longest horizon checked for configurations whose moment grows.
pub const UNSTABLE_HORIZON_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MinimizerSide {
    /// The well at `theta = -1`, owned by group 0.
    Minus,
    /// The well at `theta = +1`, owned by group 1.
    Plus,
}

impl MinimizerSide {
    pub const BOTH: [MinimizerSide; 2] = [MinimizerSide::Minus, MinimizerSide::Plus];

    pub fn location(self) -> f64 {
        match self {
            MinimizerSide::Minus => -1.0,
            MinimizerSide::Plus => 1.0,
        }
    }

    fn group(self) -> usize {
        match self {
            MinimizerSide::Minus => 0,
            MinimizerSide::Plus => 1,
        }
    }

    pub fn from_location(theta: f64) -> Result<Self> {
        if theta == -1.0 {
            Ok(MinimizerSide::Minus)
        } else if theta == 1.0 {
            Ok(MinimizerSide::Plus)
        } else {
            Err(Error::InvalidConfig(format!("minimizer must be -1 or +1, got {theta}")))
        }
    }
}

impl fmt::Display for MinimizerSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.location())
    }
}

fn check_two(a: &[f64], f: &[f64]) -> Result<()> {
    if a.len() != 2 || f.len() != 2 {
        return Err(Error::Unsupported(format!(
            "stability factors are defined for the two-group example only (got {} and {} groups)",
            a.len(),
            f.len()
        )));
    }
    Ok(())
}

/// `(p, w)`: probability that the owning group is drawn, and its weight.
fn owner_draw(scheme: Scheme, a: &[f64], f: &[f64], side: MinimizerSide) -> (f64, f64) {
    let g = side.group();
    match scheme {
        Scheme::Resampling => (a[g], 1.0),
        Scheme::Reweighting => (f[g], a[g] / f[g]),
    }
}

/// `E[(1 - eta W)^2]`, written as `(1 - eta a_s)^2 + eta^2 v`.
pub fn stability_factor(scheme: Scheme, a: &[f64], f: &[f64], eta: f64, side: MinimizerSide) -> Result<f64> {
    check_two(a, f)?;
    let s = side.group();
    let v = match scheme {
        Scheme::Resampling => a[0] * a[1],
        Scheme::Reweighting => f[0] * f[1] * (a[s] / f[s]).powi(2),
    };
    Ok((1.0 - eta * a[s]).powi(2) + eta * eta * v)
}

/// `E[(1 - eta W)^4]`, used for Monte Carlo error bars.
fn fourth_moment_factor(scheme: Scheme, a: &[f64], f: &[f64], eta: f64, side: MinimizerSide) -> f64 {
    let (p, w) = owner_draw(scheme, a, f, side);
    p * (1.0 - eta * w).powi(4) + (1.0 - p)
}

/// The non-zero root of `factor(eta) = 1`.
pub fn critical_learning_rate(scheme: Scheme, a: &[f64], f: &[f64], side: MinimizerSide) -> Result<f64> {
    check_two(a, f)?;
    Ok(match (scheme, side) {
        (Scheme::Resampling, _) => 2.0,
        (Scheme::Reweighting, MinimizerSide::Plus) => 2.0 / (a[1] * (1.0 + f[0] / f[1])),
        (Scheme::Reweighting, MinimizerSide::Minus) => 2.0 / (a[0] * (1.0 + f[1] / f[0])),
    })
}

/// `factor^k (theta0 - theta*)^2` for `k = 0..=steps`.
pub fn moment_curve(
    scheme: Scheme,
    a: &[f64],
    f: &[f64],
    eta: f64,
    side: MinimizerSide,
    theta0: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    let factor = stability_factor(scheme, a, f, eta, side)?;
    let d2 = (theta0 - side.location()).powi(2);
    Ok((0..=steps).map(|k| factor.powi(k as i32) * d2).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub minimizer: f64,
    pub scheme: Scheme,
    pub eta: f64,
    pub factor: f64,
    pub stable: bool,
    pub critical_eta: f64,
}

pub fn stability_report(scheme: Scheme, a: &[f64], f: &[f64], eta: f64, side: MinimizerSide) -> Result<StabilityReport> {
    let factor = stability_factor(scheme, a, f, eta, side)?;
    Ok(StabilityReport {
        minimizer: side.location(),
        scheme,
        eta,
        factor,
        stable: factor <= 1.0,
        critical_eta: critical_learning_rate(scheme, a, f, side)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCheck {
    pub step: usize,
    pub empirical: f64,
    pub exact: f64,
    pub rel_error: f64,
    /// Relative standard error of the empirical moment implied by the exact
    /// fourth moment of the multiplier.
    pub rel_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorVerification {
    pub factor: f64,
    pub replicas: usize,
    pub steps: usize,
    pub checks: Vec<MomentCheck>,
}

impl FactorVerification {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// Largest `|rel_error| / rel_std_error` over steps with non-zero spread.
    pub fn max_z_score(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.rel_std_error > 0.0)
            .map(|c| c.rel_error / c.rel_std_error)
            .fold(0.0, f64::max)
    }
}

/// Runs the linearized recursion from `theta* + 1` over `replicas` replicas
/// and compares the empirical second moment with [`moment_curve`].
#[allow(clippy::too_many_arguments)]
pub fn verify_factor_detailed(
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    side: MinimizerSide,
    replicas: usize,
    steps: usize,
    seed: u64,
) -> Result<FactorVerification> {
    if replicas < 10_000 {
        return Err(Error::InvalidConfig(format!("verify_factor needs at least 1e4 replicas, got {replicas}")));
    }
    let factor = stability_factor(scheme, a, f, eta, side)?;
    let steps = if factor > 1.0 { steps.min(UNSTABLE_HORIZON_CAP) } else { steps };
    let theta_star = side.location();
    let cfg = SgdConfig::new(eta, steps, theta_star + 1.0)
        .replicas(replicas)
        .seed(seed)
        .dynamics(Dynamics::Linearized { minimizer: theta_star })
        .histogram(HistogramSpec::default());
    let loss = GroupedLoss1D::quadratic_example();
    let stats = run_ensemble(&loss, scheme, a, f, &cfg, theta_star)?;
    let exact = moment_curve(scheme, a, f, eta, side, theta_star + 1.0, steps)?;
    let m4 = fourth_moment_factor(scheme, a, f, eta, side);
    let checks = (0..=steps)
        .map(|k| {
            let empirical = stats.second_moment[k];
            let rel_var = ((m4.powi(k as i32) / factor.powi(2 * k as i32)) - 1.0).max(0.0) / stats.active[k] as f64;
            MomentCheck {
                step: k,
                empirical,
                exact: exact[k],
                rel_error: (empirical / exact[k] - 1.0).abs(),
                rel_std_error: rel_var.sqrt(),
            }
        })
        .collect();
    Ok(FactorVerification { factor, replicas, steps, checks })
}

/// Max over `k <= steps` of `|empirical / exact - 1|`.
#[allow(clippy::too_many_arguments)]
pub fn verify_factor(
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    side: MinimizerSide,
    replicas: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    Ok(verify_factor_detailed(scheme, a, f, eta, side, replicas, steps, seed)?.max_rel_error())
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: [f64; 2] = [0.4, 0.6];
    const F: [f64; 2] = [0.9, 0.1];

    /// E[(1 - eta W)^2] by enumerating the two draws.
    fn enumerate(scheme: Scheme, a: &[f64], f: &[f64], eta: f64, side: MinimizerSide) -> f64 {
        let (probs, weights): (Vec<f64>, Vec<f64>) = match scheme {
            Scheme::Resampling => (a.to_vec(), vec![1.0, 1.0]),
            Scheme::Reweighting => (f.to_vec(), vec![a[0] / f[0], a[1] / f[1]]),
        };
        let owner = side.group();
        (0..2)
            .map(|g| {
                let w = if g == owner { weights[g] } else { 0.0 };
                probs[g] * (1.0 - eta * w).powi(2)
            })
            .sum()
    }

    #[test]
    fn figure_one_factors() {
        let r = stability_factor(Scheme::Resampling, &A, &F, 0.5, MinimizerSide::Plus).unwrap();
        let w = stability_factor(Scheme::Reweighting, &A, &F, 0.5, MinimizerSide::Plus).unwrap();
        assert!((r - 0.55).abs() < 1e-12);
        assert!((w - 1.30).abs() < 1e-12);
    }

    #[test]
    fn factor_matches_enumeration() {
        for &eta in &[0.0, 0.1, 0.5, 1.3, 2.5] {
            for side in MinimizerSide::BOTH {
                for scheme in Scheme::ALL {
                    let got = stability_factor(scheme, &A, &F, eta, side).unwrap();
                    let want = enumerate(scheme, &A, &F, eta, side);
                    assert!((got - want).abs() < 1e-12, "{scheme} {side} {eta}");
                }
            }
        }
    }

    #[test]
    fn zero_rate_is_neutral() {
        for scheme in Scheme::ALL {
            for side in MinimizerSide::BOTH {
                assert_eq!(stability_factor(scheme, &A, &F, 0.0, side).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn critical_rate_is_root() {
        for scheme in Scheme::ALL {
            for side in MinimizerSide::BOTH {
                let eta = critical_learning_rate(scheme, &A, &F, side).unwrap();
                let at = stability_factor(scheme, &A, &F, eta, side).unwrap();
                assert!((at - 1.0).abs() < 1e-12);
                assert!(stability_factor(scheme, &A, &F, 0.99 * eta, side).unwrap() < 1.0);
                assert!(stability_factor(scheme, &A, &F, 1.01 * eta, side).unwrap() > 1.0);
            }
        }
        let rw = critical_learning_rate(Scheme::Reweighting, &A, &F, MinimizerSide::Plus).unwrap();
        assert!((rw - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f_equal_a_collapses() {
        for side in MinimizerSide::BOTH {
            let r = critical_learning_rate(Scheme::Reweighting, &A, &A, side).unwrap();
            assert!((r - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn more_groups_rejected() {
        assert!(stability_factor(Scheme::Resampling, &[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], 0.1, MinimizerSide::Plus).is_err());
    }

    #[test]
    fn moment_curve_examples() {
        let c = moment_curve(Scheme::Resampling, &A, &F, 0.5, MinimizerSide::Plus, 2.0, 10).unwrap();
        assert_eq!(c[0], 1.0);
        assert!((c[10] - 0.55f64.powi(10)).abs() < 1e-15);
        assert!((c[10] - 2.533e-3).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_verification_is_exact() {
        let a = Proportions::new(A.to_vec()).unwrap();
        let f = Proportions::new(F.to_vec()).unwrap();
        let err = verify_factor(Scheme::Reweighting, &a, &f, 0.0, MinimizerSide::Plus, 10_000, 5, 1).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn unstable_horizon_is_capped() {
        let a = Proportions::new(A.to_vec()).unwrap();
        let f = Proportions::new(F.to_vec()).unwrap();
        let v = verify_factor_detailed(Scheme::Reweighting, &a, &f, 0.5, MinimizerSide::Plus, 10_000, 100, 1).unwrap();
        assert_eq!(v.steps, UNSTABLE_HORIZON_CAP);
    }

    #[test]
    fn small_ensembles_rejected() {
        let a = Proportions::new(A.to_vec()).unwrap();
        assert!(verify_factor(Scheme::Resampling, &a, &a, 0.5, MinimizerSide::Plus, 100, 5, 1).is_err());
    }
}

//! Euler–Maruyama integration of the SDE approximating SGD,
//! `dTheta = -mu(Theta) dt + sqrt(eta Sigma(Theta)) dB`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::histogram::{Histogram, HistogramSpec};
use crate::loss::{GroupedLoss1D, GroupedLossMultiD, Proportions};
use crate::rng::{RngStream, SDE_STREAM_BASE};
use crate::sampler::{mean_grad_multid, variance_grad_multid, Scheme};
use crate::sgd::{run_ensemble, ReplicaEnd, SgdConfig, Trajectory, DIVERGENCE_THRESHOLD};
use crate::stationary::PiecewiseDiffusion;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdeConfig {
    pub dt: f64,
    pub horizon: f64,
    pub theta0: f64,
    pub replicas: usize,
    pub seed: u64,
    /// Fraction of steps discarded before occupation histograms.
    pub burn_in: f64,
}

impl SdeConfig {
    pub fn new(dt: f64, horizon: f64, theta0: f64) -> Self {
        Self { dt, horizon, theta0, replicas: 1, seed: 0, burn_in: 0.5 }
    }

    /// `dt = eta` and `steps` steps, so that `Theta(k eta)` tracks `theta_k`.
    pub fn sgd_matched(eta: f64, steps: usize, theta0: f64) -> Self {
        Self::new(eta, eta * steps as f64, theta0)
    }

    pub fn replicas(mut self, replicas: usize) -> Self {
        self.replicas = replicas;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn burn_in(mut self, burn_in: f64) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            problems.push(format!("dt = {} must be > 0", self.dt));
        }
        if !(self.horizon >= self.dt) {
            problems.push(format!("horizon {} must be at least dt {}", self.horizon, self.dt));
        }
        if !self.theta0.is_finite() {
            problems.push("theta0 must be finite".into());
        }
        if self.replicas == 0 {
            problems.push("replicas must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            problems.push(format!("burn_in = {} must lie in [0, 1)", self.burn_in));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Diffusion standard deviation; tiny negative variances from cancellation
/// count as zero.
fn diffusion_sd(eta: f64, sigma: f64, theta: f64) -> Result<f64> {
    if sigma < -1e-12 {
        return Err(Error::NonPositiveVariance { theta });
    }
    Ok((eta * sigma.max(0.0)).sqrt())
}

#[inline]
fn em_step(diff: &PiecewiseDiffusion, theta: f64, dt: f64, sqrt_dt: f64, z: f64) -> Result<f64> {
    let (mu, sigma) = diff.coefficients(theta);
    Ok(theta - mu * dt + diffusion_sd(diff.eta(), sigma, theta)? * sqrt_dt * z)
}

fn simulate(
    diff: &PiecewiseDiffusion,
    cfg: &SdeConfig,
    replica: usize,
    guard: f64,
    mut visit: impl FnMut(usize, f64),
) -> Result<Option<usize>> {
    let mut rng = RngStream::new(cfg.seed, SDE_STREAM_BASE + replica as u64);
    let sqrt_dt = cfg.dt.sqrt();
    let mut theta = cfg.theta0;
    visit(0, theta);
    for k in 1..=cfg.steps() {
        theta = em_step(diff, theta, cfg.dt, sqrt_dt, rng.normal())?;
        if !theta.is_finite() || theta.abs() > guard {
            return Ok(Some(k));
        }
        visit(k, theta);
    }
    Ok(None)
}

/// One Euler–Maruyama path (replica 0 of the configured seed).
pub fn euler_maruyama(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    cfg: &SdeConfig,
) -> Result<Trajectory> {
    euler_maruyama_replica(loss, scheme, a, f, eta, cfg, 0)
}

pub fn euler_maruyama_replica(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    cfg: &SdeConfig,
    replica: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    let diff = PiecewiseDiffusion::new(loss, scheme, a, f, eta)?;
    let mut iterates = Vec::with_capacity(cfg.steps() + 1);
    match simulate(&diff, cfg, replica, f64::INFINITY, |_, t| iterates.push(t))? {
        None => Ok(Trajectory { iterates }),
        Some(step) => Err(Error::NonFinite { step }),
    }
}

/// Terminal states of `cfg.replicas` independent paths, in replica order.
pub fn terminal_states(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    cfg: &SdeConfig,
) -> Result<Vec<ReplicaEnd>> {
    cfg.validate()?;
    let diff = PiecewiseDiffusion::new(loss, scheme, a, f, eta)?;
    (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut last = cfg.theta0;
            Ok(match simulate(&diff, cfg, r, DIVERGENCE_THRESHOLD, |_, t| last = t)? {
                None => ReplicaEnd::Finite(last),
                Some(step) => ReplicaEnd::Diverged { step },
            })
        })
        .collect()
}

/// Pooled post-burn-in occupation histogram over all replicas.
pub fn occupation_histogram(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    cfg: &SdeConfig,
    spec: HistogramSpec,
) -> Result<Histogram> {
    cfg.validate()?;
    let diff = PiecewiseDiffusion::new(loss, scheme, a, f, eta)?;
    let burn = (cfg.burn_in * cfg.steps() as f64).ceil() as usize;
    let parts: Vec<Result<Option<Histogram>>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut h = Histogram::empty(spec);
            let diverged = simulate(&diff, cfg, r, DIVERGENCE_THRESHOLD, |k, t| {
                if k >= burn {
                    h.add(t)
                }
            })?;
            Ok(diverged.is_none().then_some(h))
        })
        .collect();
    let mut total = Histogram::empty(spec);
    for part in parts {
        if let Some(h) = part? {
            total.merge(&h);
        }
    }
    if total.in_domain() == 0 {
        return Err(Error::Empty("no SDE samples inside the histogram domain".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakConfig {
    pub horizon: f64,
    pub replicas: usize,
    pub theta0: f64,
    pub seed: u64,
    pub histogram: HistogramSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakComparison {
    pub eta: f64,
    pub steps: usize,
    pub distance: f64,
    pub sgd: Histogram,
    pub sde: Histogram,
}

/// Total-variation distance between SGD and SDE terminal histograms after
/// `K = T / eta` steps, both started at `theta0`.
pub fn weak_comparison(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    wc: &WeakConfig,
) -> Result<WeakComparison> {
    if wc.replicas < 1000 {
        return Err(Error::InvalidConfig(format!("weak comparison needs at least 1e3 replicas, got {}", wc.replicas)));
    }
    let steps = ((wc.horizon / eta).round() as usize).max(1);
    let sgd_cfg = SgdConfig::new(eta, steps, wc.theta0).replicas(wc.replicas).seed(wc.seed).histogram(wc.histogram);
    let stats = run_ensemble(loss, scheme, a, f, &sgd_cfg, wc.theta0)?;
    let sgd = Histogram::from_samples(wc.histogram, stats.terminal_values());
    let sde_cfg = SdeConfig::sgd_matched(eta, steps, wc.theta0).replicas(wc.replicas).seed(wc.seed);
    let ends = terminal_states(loss, scheme, a, f, eta, &sde_cfg)?;
    let sde = Histogram::from_samples(
        wc.histogram,
        ends.iter().filter_map(|e| match e {
            ReplicaEnd::Finite(x) => Some(*x),
            ReplicaEnd::Diverged { .. } => None,
        }),
    );
    let distance = sgd.tv_distance(&sde)?;
    Ok(WeakComparison { eta, steps, distance, sgd, sde })
}

pub fn weak_distance(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    wc: &WeakConfig,
) -> Result<f64> {
    Ok(weak_comparison(loss, scheme, a, f, eta, wc)?.distance)
}

/// Multi-dimensional path with isotropic diffusion `sqrt(eta tr(Sigma)/d) I`.
#[allow(clippy::too_many_arguments)]
pub fn euler_maruyama_multid(
    loss: &GroupedLossMultiD,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    dt: f64,
    steps: usize,
    theta0: &[f64],
    seed: u64,
    replica: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = loss.dim();
    if theta0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta0.len() });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("dt = {dt} must be > 0")));
    }
    let mut rng = RngStream::new(seed, SDE_STREAM_BASE + replica as u64);
    let mut theta = theta0.to_vec();
    let mut path = Vec::with_capacity(steps + 1);
    path.push(theta.clone());
    let sqrt_dt = dt.sqrt();
    for k in 1..=steps {
        let mu = mean_grad_multid(loss, a, &theta)?;
        let cov = variance_grad_multid(scheme, loss, a, f, &theta)?;
        let sd = diffusion_sd(eta, cov.trace() / d as f64, theta[0])?;
        for (i, t) in theta.iter_mut().enumerate() {
            *t += -mu[i] * dt + sd * sqrt_dt * rng.normal();
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        path.push(theta.clone());
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Piece;

    fn props(x: f64, y: f64) -> Proportions {
        Proportions::two(x, y).unwrap()
    }

    fn single_group_quadratic() -> (GroupedLoss1D, Proportions) {
        let loss = GroupedLoss1D::new(vec![], vec![vec![Piece::Quadratic { curvature: 2.0, center: 0.5, offset: 0.0 }]], 0.0).unwrap();
        (loss, Proportions::new(vec![1.0]).unwrap())
    }

    #[test]
    fn zero_diffusion_is_gradient_flow() {
        let (loss, one) = single_group_quadratic();
        let cfg = SdeConfig::new(0.1, 3.0, 2.0).seed(4);
        let t = euler_maruyama(&loss, Scheme::Reweighting, &one, &one, 0.1, &cfg).unwrap();
        let mut theta = 2.0;
        for k in 1..t.iterates.len() {
            theta -= 0.1 * 2.0 * (theta - 0.5);
            assert_eq!(t.iterates[k], theta);
        }
    }

    #[test]
    fn zero_diffusion_weak_distance_vanishes() {
        let (loss, one) = single_group_quadratic();
        let wc = WeakConfig { horizon: 1.0, replicas: 1000, theta0: 2.0, seed: 1, histogram: HistogramSpec::default() };
        assert_eq!(weak_distance(&loss, Scheme::Resampling, &one, &one, 0.1, &wc).unwrap(), 0.0);
    }

    #[test]
    fn linear_example_resampling_diffusion() {
        let loss = GroupedLoss1D::linear_example(1e-6).unwrap();
        let a = props(0.4, 0.6);
        let d = PiecewiseDiffusion::new(&loss, Scheme::Resampling, &a, &a, 0.12).unwrap();
        for &t in &[-1.7, -0.4, 0.3, 1.6] {
            assert!((d.coefficients(t).1 - 0.24).abs() < 1e-5);
        }
    }

    #[test]
    fn one_step_increment_moments() {
        let loss = GroupedLoss1D::linear_example(0.1).unwrap();
        let (a, f) = (props(0.4, 0.6), props(0.9, 0.1));
        let eta = 0.1;
        let r = 100_000;
        for scheme in Scheme::ALL {
            let diff = PiecewiseDiffusion::new(&loss, scheme, &a, &f, eta).unwrap();
            for &theta0 in &[-1.5, -0.5, 0.5, 1.5] {
                let cfg = SdeConfig::sgd_matched(eta, 1, theta0).replicas(r).seed(9);
                let ends = terminal_states(&loss, scheme, &a, &f, eta, &cfg).unwrap();
                let inc: Vec<f64> = ends
                    .iter()
                    .map(|e| match e {
                        ReplicaEnd::Finite(x) => x - theta0,
                        _ => panic!(),
                    })
                    .collect();
                let mean = inc.iter().sum::<f64>() / r as f64;
                let var = inc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
                let (mu, sigma) = diff.coefficients(theta0);
                let (em, ev) = (-mu * eta, eta * sigma * eta);
                assert!((mean - em).abs() < 4.0 * (ev / r as f64).sqrt(), "{scheme} {theta0}");
                // variance of a Gaussian sample variance is 2 v^2 / (n - 1)
                assert!((var - ev).abs() < 4.0 * ev * (2.0 / (r - 1) as f64).sqrt(), "{scheme} {theta0}");
            }
        }
    }

    #[test]
    fn reproducible_by_seed() {
        let loss = GroupedLoss1D::linear_example(0.1).unwrap();
        let (a, f) = (props(0.4, 0.6), props(0.9, 0.1));
        let cfg = SdeConfig::sgd_matched(0.12, 200, 0.9).seed(3);
        let t1 = euler_maruyama(&loss, Scheme::Reweighting, &a, &f, 0.12, &cfg).unwrap();
        let t2 = euler_maruyama(&loss, Scheme::Reweighting, &a, &f, 0.12, &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.iterates.len(), 201);
    }

    #[test]
    fn bad_config_lists_every_problem() {
        let cfg = SdeConfig { dt: 0.0, horizon: -1.0, theta0: f64::NAN, replicas: 0, seed: 0, burn_in: 1.0 };
        let msg = cfg.validate().unwrap_err().to_string();
        for key in ["dt", "horizon", "theta0", "replicas", "burn_in"] {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn multid_path_shape() {
        let loss = GroupedLossMultiD::two_region_example(2, 1.0, 1.0, 0.1).unwrap();
        let (a, f) = (props(0.4, 0.6), props(0.9, 0.1));
        let p = euler_maruyama_multid(&loss, Scheme::Resampling, &a, &f, 0.1, 0.1, 50, &[0.5, 0.0], 1, 0).unwrap();
        assert_eq!(p.len(), 51);
        assert!(p.iter().all(|x| x.len() == 2));
    }
}

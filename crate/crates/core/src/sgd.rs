//! SGD trajectories and replica ensembles.
//!
//! Every replica `r` draws from its own [`RngStream`] `(seed, SGD_STREAM_BASE + r)`,
//! so ensembles are reproducible regardless of how replicas are scheduled.
//! Aggregation is an ordered reduction over replica index.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::histogram::{Histogram, HistogramSpec};
use crate::loss::{GroupedLoss1D, GroupedLossMultiD, Proportions};
use crate::rng::{RngStream, SGD_STREAM_BASE};
use crate::sampler::{GradientSampler, Scheme};

/// Iterates beyond this magnitude mark a replica as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Upper bound on stored path values per parallel chunk.
const CHUNK_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Dynamics {
    /// Plain SGD on the piecewise loss.
    Full,
    /// The linear recursion `theta' - c = (1 - eta W)(theta - c)` around the
    /// minimizer `c`, where `W` is the drawn group's weight times its
    /// curvature at `c`. Never re-projects onto pieces.
    Linearized { minimizer: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SgdConfig {
    pub eta: f64,
    pub steps: usize,
    pub theta0: f64,
    pub replicas: usize,
    /// Fraction of the steps discarded before histogramming.
    pub burn_in: f64,
    pub seed: u64,
    pub dynamics: Dynamics,
    pub histogram: HistogramSpec,
}

impl SgdConfig {
    pub fn new(eta: f64, steps: usize, theta0: f64) -> Self {
        Self {
            eta,
            steps,
            theta0,
            replicas: 1,
            burn_in: 0.5,
            seed: 0,
            dynamics: Dynamics::Full,
            histogram: HistogramSpec::default(),
        }
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

    pub fn dynamics(mut self, dynamics: Dynamics) -> Self {
        self.dynamics = dynamics;
        self
    }

    pub fn histogram(mut self, spec: HistogramSpec) -> Self {
        self.histogram = spec;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            problems.push(format!("eta = {} must be a finite non-negative number", self.eta));
        }
        if self.steps == 0 {
            problems.push("steps must be >= 1".to_string());
        }
        if !self.theta0.is_finite() {
            problems.push("theta0 must be finite".to_string());
        }
        if self.replicas == 0 {
            problems.push("replicas must be >= 1".to_string());
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

    /// First step index that enters the histogram.
    pub fn burn_in_steps(&self) -> usize {
        (self.burn_in * self.steps as f64).ceil() as usize
    }
}

/// Iterates `theta_0..=theta_K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub iterates: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> f64 {
        *self.iterates.last().expect("trajectory holds theta_0")
    }
}

enum Stepper<'a> {
    Full { loss: &'a GroupedLoss1D, sampler: GradientSampler },
    Linearized { center: f64, sampler: GradientSampler, curvature: Vec<f64> },
}

impl<'a> Stepper<'a> {
    fn new(loss: &'a GroupedLoss1D, scheme: Scheme, a: &Proportions, f: &Proportions, dynamics: Dynamics) -> Result<Self> {
        if a.len() != loss.groups() {
            return Err(Error::DimensionMismatch { expected: loss.groups(), got: a.len() });
        }
        let sampler = GradientSampler::new(scheme, a, f)?;
        match dynamics {
            Dynamics::Full => Ok(Stepper::Full { loss, sampler }),
            Dynamics::Linearized { minimizer } => {
                let j = loss.interval_of(minimizer);
                let mut curvature = Vec::with_capacity(loss.groups());
                for g in 0..loss.groups() {
                    let piece = loss.piece(g, j)?;
                    let c = piece.curvature().ok_or_else(|| {
                        Error::Unsupported("linearized dynamics need closed-form pieces".into())
                    })?;
                    if piece.grad(minimizer).abs() > 1e-12 {
                        return Err(Error::Unsupported(format!(
                            "group {g} has non-zero gradient at {minimizer}; the linear recursion needs all groups stationary there"
                        )));
                    }
                    curvature.push(c);
                }
                Ok(Stepper::Linearized { center: minimizer, sampler, curvature })
            }
        }
    }

    #[inline]
    fn step(&self, theta: f64, eta: f64, rng: &mut RngStream) -> Result<f64> {
        match self {
            Stepper::Full { loss, sampler } => Ok(theta - eta * sampler.draw(loss, theta, rng)?.grad),
            Stepper::Linearized { center, sampler, curvature } => {
                let (g, w) = sampler.draw_group(rng);
                let factor = 1.0 - eta * w * curvature[g];
                Ok(center + factor * (theta - center))
            }
        }
    }
}

/// Runs one replica and keeps the whole path; stops early when the iterate
/// leaves the finite range or exceeds `guard` in magnitude.
fn run_path(stepper: &Stepper<'_>, cfg: &SgdConfig, replica: usize, guard: f64) -> Result<(Vec<f64>, Option<usize>)> {
    let mut rng = RngStream::new(cfg.seed, SGD_STREAM_BASE + replica as u64);
    let mut path = Vec::with_capacity(cfg.steps + 1);
    let mut theta = cfg.theta0;
    path.push(theta);
    for k in 1..=cfg.steps {
        theta = stepper.step(theta, cfg.eta, &mut rng)?;
        if !theta.is_finite() || theta.abs() > guard {
            return Ok((path, Some(k)));
        }
        path.push(theta);
    }
    Ok((path, None))
}

/// A single SGD trajectory (replica 0 of the configured seed).
pub fn run(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    cfg: &SgdConfig,
) -> Result<Trajectory> {
    run_replica(loss, scheme, a, f, cfg, 0)
}

pub fn run_replica(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    cfg: &SgdConfig,
    replica: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    let stepper = Stepper::new(loss, scheme, a, f, cfg.dynamics)?;
    match run_path(&stepper, cfg, replica, f64::INFINITY)? {
        (iterates, None) => Ok(Trajectory { iterates }),
        (_, Some(step)) => Err(Error::NonFinite { step }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ReplicaEnd {
    Finite(f64),
    Diverged { step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub replicas: usize,
    pub theta_ref: f64,
    /// Per-step mean of `theta_k` over replicas still finite at step `k`.
    pub mean: Vec<f64>,
    /// Per-step `E[(theta_k - theta_ref)^2]` over the same replicas.
    pub second_moment: Vec<f64>,
    /// Number of replicas contributing at each step.
    pub active: Vec<usize>,
    pub terminal: Vec<ReplicaEnd>,
    /// Pooled post-burn-in iterates of the non-diverged replicas.
    pub histogram: Histogram,
}

impl EnsembleStats {
    pub fn diverged(&self) -> usize {
        self.terminal.iter().filter(|e| matches!(e, ReplicaEnd::Diverged { .. })).count()
    }

    pub fn terminal_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.terminal.iter().filter_map(|e| match e {
            ReplicaEnd::Finite(x) => Some(*x),
            ReplicaEnd::Diverged { .. } => None,
        })
    }
}

struct ReplicaSummary {
    path: Vec<f64>,
    diverged_at: Option<usize>,
    histogram: Histogram,
}

pub fn run_ensemble(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    cfg: &SgdConfig,
    theta_ref: f64,
) -> Result<EnsembleStats> {
    cfg.validate()?;
    let stepper = Stepper::new(loss, scheme, a, f, cfg.dynamics)?;
    let k = cfg.steps;
    let burn = cfg.burn_in_steps();
    let mut sum = vec![0.0; k + 1];
    let mut sum_sq = vec![0.0; k + 1];
    let mut active = vec![0usize; k + 1];
    let mut terminal = Vec::with_capacity(cfg.replicas);
    let mut histogram = Histogram::empty(cfg.histogram);

    let chunk = (CHUNK_BUDGET / (k + 1)).max(1);
    let mut start = 0;
    while start < cfg.replicas {
        let end = (start + chunk).min(cfg.replicas);
        let results: Vec<Result<ReplicaSummary>> = (start..end)
            .into_par_iter()
            .map(|r| {
                let (path, diverged_at) = run_path(&stepper, cfg, r, DIVERGENCE_THRESHOLD)?;
                let mut histogram = Histogram::empty(cfg.histogram);
                if diverged_at.is_none() {
                    path[burn.min(k)..].iter().for_each(|&x| histogram.add(x));
                }
                Ok(ReplicaSummary { path, diverged_at, histogram })
            })
            .collect();
        for res in results {
            let rep = res?;
            for (step, &x) in rep.path.iter().enumerate() {
                let d = x - theta_ref;
                sum[step] += x;
                sum_sq[step] += d * d;
                active[step] += 1;
            }
            terminal.push(match rep.diverged_at {
                Some(step) => ReplicaEnd::Diverged { step },
                None => ReplicaEnd::Finite(*rep.path.last().expect("non-empty path")),
            });
            histogram.merge(&rep.histogram);
        }
        start = end;
    }

    let mean = sum.iter().zip(&active).map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN }).collect();
    let second_moment = sum_sq.iter().zip(&active).map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN }).collect();
    Ok(EnsembleStats { replicas: cfg.replicas, theta_ref, mean, second_moment, active, terminal, histogram })
}

/// Normalizable histogram of the given (already burned-in) samples.
pub fn stationary_histogram(samples: &[f64], spec: HistogramSpec) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::Empty("no post-burn-in samples".into()));
    }
    Ok(Histogram::from_samples(spec, samples.iter().copied()))
}

/// Histogram of a trajectory after discarding the first `burn_in` fraction.
pub fn trajectory_histogram(traj: &Trajectory, burn_in: f64, spec: HistogramSpec) -> Result<Histogram> {
    let steps = traj.iterates.len().saturating_sub(1);
    let start = (burn_in * steps as f64).ceil() as usize;
    stationary_histogram(traj.iterates.get(start..).unwrap_or(&[]), spec)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinFractions {
    pub centers: Vec<f64>,
    pub radius: f64,
    pub fractions: Vec<f64>,
    pub unclassified: f64,
    pub diverged: f64,
}

/// Fraction of replicas ending within `radius` of each center. Remaining
/// finite replicas are unclassified; diverged replicas are reported apart.
pub fn basin_fraction(stats: &EnsembleStats, centers: &[f64], radius: f64) -> Result<BasinFractions> {
    if centers.is_empty() {
        return Err(Error::InvalidConfig("no basin centers".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!("basin radius {radius} must be > 0")));
    }
    for (i, x) in centers.iter().enumerate() {
        for y in &centers[i + 1..] {
            let sep = (x - y).abs();
            if sep == 0.0 {
                return Err(Error::InvalidConfig("basin centers must be distinct".into()));
            }
            if radius >= 0.5 * sep {
                return Err(Error::InvalidConfig(format!(
                    "basins overlap: radius {radius} is not below half the separation {sep}"
                )));
            }
        }
    }
    let n = stats.terminal.len() as f64;
    let mut hits = vec![0usize; centers.len()];
    let mut unclassified = 0usize;
    let mut diverged = 0usize;
    for end in &stats.terminal {
        match end {
            ReplicaEnd::Diverged { .. } => diverged += 1,
            ReplicaEnd::Finite(x) => match centers.iter().position(|c| (x - c).abs() <= radius) {
                Some(i) => hits[i] += 1,
                None => unclassified += 1,
            },
        }
    }
    Ok(BasinFractions {
        centers: centers.to_vec(),
        radius,
        fractions: hits.iter().map(|&h| h as f64 / n).collect(),
        unclassified: unclassified as f64 / n,
        diverged: diverged as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiDConfig {
    pub eta: f64,
    pub steps: usize,
    pub theta0: Vec<f64>,
    pub replicas: usize,
    pub burn_in: f64,
    pub seed: u64,
}

impl MultiDConfig {
    fn validate(&self, dim: usize) -> Result<()> {
        let base = SgdConfig {
            eta: self.eta,
            steps: self.steps,
            theta0: 0.0,
            replicas: self.replicas,
            burn_in: self.burn_in,
            seed: self.seed,
            dynamics: Dynamics::Full,
            histogram: HistogramSpec::default(),
        };
        base.validate()?;
        if self.theta0.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.theta0.len() });
        }
        Ok(())
    }
}

/// Region occupancy of a multi-dimensional ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiDStats {
    pub replicas: usize,
    /// Post-burn-in visits per region, pooled over non-diverged replicas.
    pub occupancy: Vec<u64>,
    /// Post-burn-in visits outside every region.
    pub outside: u64,
    /// Replicas whose final iterate lies in each region.
    pub terminal_regions: Vec<usize>,
    pub diverged: usize,
}

impl MultiDStats {
    pub fn occupancy_fractions(&self) -> Vec<f64> {
        let total: u64 = self.occupancy.iter().sum::<u64>() + self.outside;
        self.occupancy.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }

    pub fn dominant_region(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.occupancy.iter().enumerate() {
            if c > self.occupancy[best] {
                best = i;
            }
        }
        best
    }
}

fn run_multid_path(
    loss: &GroupedLossMultiD,
    sampler: &GradientSampler,
    cfg: &MultiDConfig,
    replica: usize,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Option<usize>> {
    let mut rng = RngStream::new(cfg.seed, SGD_STREAM_BASE + replica as u64);
    let mut theta = cfg.theta0.clone();
    visit(0, &theta);
    for k in 1..=cfg.steps {
        let d = sampler.draw_multid(loss, &theta, &mut rng)?;
        for (t, g) in theta.iter_mut().zip(&d.grad) {
            *t -= cfg.eta * g;
        }
        if theta.iter().any(|t| !t.is_finite() || t.abs() > DIVERGENCE_THRESHOLD) {
            return Ok(Some(k));
        }
        visit(k, &theta);
    }
    Ok(None)
}

/// One multi-dimensional trajectory, replica 0.
pub fn run_multid(
    loss: &GroupedLossMultiD,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    cfg: &MultiDConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate(loss.dim())?;
    let sampler = GradientSampler::new(scheme, a, f)?;
    let mut path = Vec::with_capacity(cfg.steps + 1);
    match run_multid_path(loss, &sampler, cfg, 0, |_, t| path.push(t.to_vec()))? {
        None => Ok(path),
        Some(step) => Err(Error::NonFinite { step }),
    }
}

/// Kept-step region counts, kept steps outside every region, terminal region, divergence step.
type ReplicaTally = (Vec<u64>, u64, Option<usize>, Option<usize>);

pub fn run_ensemble_multid(
    loss: &GroupedLossMultiD,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    cfg: &MultiDConfig,
) -> Result<MultiDStats> {
    cfg.validate(loss.dim())?;
    let sampler = GradientSampler::new(scheme, a, f)?;
    let burn = (cfg.burn_in * cfg.steps as f64).ceil() as usize;
    let regions = loss.groups();
    let per_replica: Vec<Result<ReplicaTally>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut occ = vec![0u64; regions];
            let mut outside = 0u64;
            let mut last = None;
            let diverged = run_multid_path(loss, &sampler, cfg, r, |k, t| {
                let region = loss.region_of(t);
                if k >= burn {
                    match region {
                        Some(i) => occ[i] += 1,
                        None => outside += 1,
                    }
                }
                if k == cfg.steps {
                    last = region;
                }
            })?;
            Ok((occ, outside, last, diverged))
        })
        .collect();
    let mut stats = MultiDStats {
        replicas: cfg.replicas,
        occupancy: vec![0; regions],
        outside: 0,
        terminal_regions: vec![0; regions],
        diverged: 0,
    };
    for res in per_replica {
        let (occ, outside, last, diverged) = res?;
        if diverged.is_some() {
            stats.diverged += 1;
            continue;
        }
        for (s, o) in stats.occupancy.iter_mut().zip(&occ) {
            *s += o;
        }
        stats.outside += outside;
        if let Some(i) = last {
            stats.terminal_regions[i] += 1;
        }
    }
    Ok(stats)
}

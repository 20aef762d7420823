//! Grouped loss families and their exact evaluation.
//!
//! A one-dimensional family is described by sorted breakpoints
//! `xi_1 < ... < xi_m`, splitting the line into the intervals
//! `(-inf, xi_1], (xi_1, xi_2], ..., (xi_m, inf)`, and one [`Piece`] per
//! group and interval. A breakpoint belongs to the interval on its left, so
//! values and gradients at `xi` come from the left piece.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROPORTION_SUM_TOL: f64 = 1e-12;
const CONTINUITY_TOL: f64 = 1e-9;

/// Group proportions: strictly positive entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proportions(Vec<f64>);

impl Proportions {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidProportions("no entries".into()));
        }
        if let Some(bad) = entries.iter().find(|p| !(p.is_finite() && **p > 0.0 && **p < 1.0 + PROPORTION_SUM_TOL)) {
            return Err(Error::InvalidProportions(format!(
                "entry {bad} is not strictly positive"
            )));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > PROPORTION_SUM_TOL {
            return Err(Error::InvalidProportions(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self(entries))
    }

    pub fn two(first: f64, second: f64) -> Result<Self> {
        Self::new(vec![first, second])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for Proportions {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A general convex piece given by its value `h` and derivative `h'`.
#[derive(Clone)]
pub struct ConvexPiece {
    label: String,
    value: ScalarFn,
    derivative: ScalarFn,
    minimizer: Option<f64>,
}

impl ConvexPiece {
    pub fn new(
        label: impl Into<String>,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            value: Arc::new(value),
            derivative: Arc::new(derivative),
            minimizer: None,
        }
    }

    /// `h(theta) = scale * |theta - center|^power + offset`.
    ///
    /// `power > 1` gives a strictly convex C^1 piece; `power == 1` is the
    /// piecewise-linear limit with `|h'| = scale`.
    pub fn power(scale: f64, center: f64, offset: f64, power: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidLoss(format!("power piece scale {scale} must be > 0")));
        }
        if !(power >= 1.0 && power.is_finite()) {
            return Err(Error::InvalidLoss(format!("power piece exponent {power} must be >= 1")));
        }
        let label = format!("{scale}*|t-({center})|^{power}+({offset})");
        let value = move |t: f64| scale * (t - center).abs().powf(power) + offset;
        let derivative = move |t: f64| {
            let d = t - center;
            // left derivative at the kink, matching breakpoint ownership
            let sign = if d > 0.0 { 1.0 } else { -1.0 };
            if power == 1.0 {
                sign * scale
            } else {
                sign * scale * power * d.abs().powf(power - 1.0)
            }
        };
        let mut piece = Self::new(label, value, derivative);
        piece.minimizer = Some(center);
        Ok(piece)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn value(&self, theta: f64) -> f64 {
        (self.value)(theta)
    }

    pub fn derivative(&self, theta: f64) -> f64 {
        (self.derivative)(theta)
    }

    /// Known minimizer of `h`, when the piece was built from a closed form.
    pub fn known_minimizer(&self) -> Option<f64> {
        self.minimizer
    }

    pub fn with_minimizer(mut self, theta: f64) -> Self {
        self.minimizer = Some(theta);
        self
    }
}

impl fmt::Debug for ConvexPiece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexPiece").field("label", &self.label).finish()
    }
}

/// One group's loss restricted to one interval.
#[derive(Debug, Clone)]
pub enum Piece {
    /// `0.5 * curvature * (theta - center)^2 + offset`
    Quadratic { curvature: f64, center: f64, offset: f64 },
    /// `slope * theta + offset`
    Linear { slope: f64, offset: f64 },
    Convex(ConvexPiece),
}

impl Piece {
    pub fn zero() -> Self {
        Piece::Linear { slope: 0.0, offset: 0.0 }
    }

    pub fn value(&self, theta: f64) -> f64 {
        match self {
            Piece::Quadratic { curvature, center, offset } => {
                0.5 * curvature * (theta - center).powi(2) + offset
            }
            Piece::Linear { slope, offset } => slope * theta + offset,
            Piece::Convex(h) => h.value(theta),
        }
    }

    pub fn grad(&self, theta: f64) -> f64 {
        match self {
            Piece::Quadratic { curvature, center, .. } => curvature * (theta - center),
            Piece::Linear { slope, .. } => *slope,
            Piece::Convex(h) => h.derivative(theta),
        }
    }

    /// Second derivative for the closed-form pieces.
    pub fn curvature(&self) -> Option<f64> {
        match self {
            Piece::Quadratic { curvature, .. } => Some(*curvature),
            Piece::Linear { .. } => Some(0.0),
            Piece::Convex(_) => None,
        }
    }

    /// Gradient written as `slope * theta + intercept`, for closed-form pieces.
    fn affine_grad(&self) -> Option<(f64, f64)> {
        match self {
            Piece::Quadratic { curvature, center, .. } => Some((*curvature, -curvature * center)),
            Piece::Linear { slope, .. } => Some((0.0, *slope)),
            Piece::Convex(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    QuadraticExample,
    LinearExample,
    GeneralConvex,
    Custom,
}

/// A local minimizer of the population loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Minimizer {
    pub location: f64,
    pub value: f64,
    /// Index of the interval that owns `location`.
    pub piece: usize,
}

/// Grouped one-dimensional loss `V_i`, `i = 0..groups`.
#[derive(Debug, Clone)]
pub struct GroupedLoss1D {
    family: LossFamily,
    breakpoints: Vec<f64>,
    /// `pieces[group][interval]`
    pieces: Vec<Vec<Piece>>,
    epsilon: f64,
}

impl GroupedLoss1D {
    pub fn new(breakpoints: Vec<f64>, pieces: Vec<Vec<Piece>>, epsilon: f64) -> Result<Self> {
        Self::with_family(LossFamily::Custom, breakpoints, pieces, epsilon)
    }

    fn with_family(
        family: LossFamily,
        breakpoints: Vec<f64>,
        pieces: Vec<Vec<Piece>>,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidLoss(format!("epsilon {epsilon} must be >= 0")));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidLoss("breakpoints must be finite".into()));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidLoss("breakpoints must be strictly increasing".into()));
        }
        if pieces.is_empty() {
            return Err(Error::InvalidLoss("no groups".into()));
        }
        let intervals = breakpoints.len() + 1;
        for (g, row) in pieces.iter().enumerate() {
            if row.len() != intervals {
                return Err(Error::InvalidLoss(format!(
                    "group {g} has {} pieces, expected {intervals}",
                    row.len()
                )));
            }
            for (j, &xi) in breakpoints.iter().enumerate() {
                let left = row[j].value(xi);
                let right = row[j + 1].value(xi);
                if (left - right).abs() > CONTINUITY_TOL * (1.0 + left.abs().max(right.abs())) {
                    return Err(Error::InvalidLoss(format!(
                        "group {g} is discontinuous at breakpoint {xi}: {left} vs {right}"
                    )));
                }
            }
        }
        Ok(Self { family, breakpoints, pieces, epsilon })
    }

    /// The two-group example with quadratic wells at -1 and +1 on disjoint
    /// supports `theta <= 0` and `theta > 0`.
    pub fn quadratic_example() -> Self {
        let well = |center: f64| Piece::Quadratic { curvature: 1.0, center, offset: -0.5 };
        let pieces = vec![vec![well(-1.0), Piece::zero()], vec![Piece::zero(), well(1.0)]];
        Self::with_family(LossFamily::QuadraticExample, vec![0.0], pieces, 0.0)
            .expect("quadratic example is well formed")
    }

    /// The two-group piecewise-linear example:
    /// `V_1 = |theta + 1| - 1` on `theta <= 0`, `epsilon * theta` beyond;
    /// `V_2 = -epsilon * theta` on `theta <= 0`, `|theta - 1| - 1` beyond.
    pub fn linear_example(epsilon: f64) -> Result<Self> {
        let lin = |slope: f64, offset: f64| Piece::Linear { slope, offset };
        let pieces = vec![
            vec![lin(-1.0, -2.0), lin(1.0, 0.0), lin(epsilon, 0.0), lin(epsilon, 0.0)],
            vec![lin(-epsilon, 0.0), lin(-epsilon, 0.0), lin(-1.0, 0.0), lin(1.0, -2.0)],
        ];
        Self::with_family(LossFamily::LinearExample, vec![-1.0, 0.0, 1.0], pieces, epsilon)
    }

    /// `k` groups over `k - 1` breakpoints: group `i` equals `shapes[i]` on
    /// interval `i` and continues linearly with slope `epsilon` away from its
    /// support elsewhere, so each `V_i` is continuous and increasing away from
    /// its own interval.
    pub fn general_convex(breakpoints: Vec<f64>, shapes: Vec<ConvexPiece>, epsilon: f64) -> Result<Self> {
        if shapes.len() != breakpoints.len() + 1 {
            return Err(Error::InvalidLoss(format!(
                "{} convex shapes for {} breakpoints; need one per interval",
                shapes.len(),
                breakpoints.len()
            )));
        }
        let k = shapes.len();
        let mut pieces = Vec::with_capacity(k);
        for (i, h) in shapes.iter().enumerate() {
            let mut row = Vec::with_capacity(k);
            for j in 0..k {
                let piece = if j == i {
                    Piece::Convex(h.clone())
                } else if j > i {
                    let edge = breakpoints[i];
                    Piece::Linear { slope: epsilon, offset: h.value(edge) - epsilon * edge }
                } else {
                    let edge = breakpoints[i - 1];
                    Piece::Linear { slope: -epsilon, offset: h.value(edge) + epsilon * edge }
                };
                row.push(piece);
            }
            pieces.push(row);
        }
        Self::with_family(LossFamily::GeneralConvex, breakpoints, pieces, epsilon)
    }

    pub fn family(&self) -> LossFamily {
        self.family
    }

    pub fn groups(&self) -> usize {
        self.pieces.len()
    }

    pub fn intervals(&self) -> usize {
        self.breakpoints.len() + 1
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Bounds `(lo, hi]` of interval `j`, with infinities at the ends.
    pub fn interval_bounds(&self, j: usize) -> (f64, f64) {
        let lo = if j == 0 { f64::NEG_INFINITY } else { self.breakpoints[j - 1] };
        let hi = self.breakpoints.get(j).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    /// Interval owning `theta`: the number of breakpoints strictly below it.
    pub fn interval_of(&self, theta: f64) -> usize {
        self.breakpoints.partition_point(|&b| b < theta)
    }

    pub fn piece(&self, group: usize, interval: usize) -> Result<&Piece> {
        let row = self
            .pieces
            .get(group)
            .ok_or(Error::InvalidGroup { index: group, groups: self.groups() })?;
        row.get(interval).ok_or_else(|| {
            Error::InvalidLoss(format!("interval {interval} out of range ({})", self.intervals()))
        })
    }

    pub fn group_value(&self, group: usize, theta: f64) -> Result<f64> {
        Ok(self.piece(group, self.interval_of(theta))?.value(theta))
    }

    pub fn group_grad(&self, group: usize, theta: f64) -> Result<f64> {
        Ok(self.piece(group, self.interval_of(theta))?.grad(theta))
    }

    /// Per-group gradients at `theta`, evaluated with the pieces of `interval`
    /// (which need not own `theta`; used for one-sided limits).
    pub fn grads_in(&self, interval: usize, theta: f64) -> Vec<f64> {
        self.pieces.iter().map(|row| row[interval].grad(theta)).collect()
    }

    pub fn grads(&self, theta: f64) -> Vec<f64> {
        self.grads_in(self.interval_of(theta), theta)
    }

    fn check_weights(&self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.groups() {
            return Err(Error::DimensionMismatch { expected: self.groups(), got: weights.len() });
        }
        Ok(())
    }

    /// `sum_i a_i V_i(theta)`. The weights need not be strictly positive.
    pub fn population_value(&self, weights: &[f64], theta: f64) -> Result<f64> {
        self.check_weights(weights)?;
        let j = self.interval_of(theta);
        Ok(self.pieces.iter().zip(weights).map(|(row, a)| a * row[j].value(theta)).sum())
    }

    pub fn population_grad(&self, weights: &[f64], theta: f64) -> Result<f64> {
        self.check_weights(weights)?;
        Ok(self.population_grad_in(weights, self.interval_of(theta), theta))
    }

    fn population_grad_in(&self, weights: &[f64], interval: usize, theta: f64) -> f64 {
        self.pieces.iter().zip(weights).map(|(row, a)| a * row[interval].grad(theta)).sum()
    }

    /// Local minimizers of the population loss, one per interval at most,
    /// sorted by location. Kinks where the gradient changes sign from negative
    /// to positive count as minimizers.
    pub fn local_minimizers(&self, weights: &[f64]) -> Result<Vec<Minimizer>> {
        self.check_weights(weights)?;
        let mut found: Vec<Minimizer> = Vec::new();
        for j in 0..self.intervals() {
            let (lo, hi) = self.interval_bounds(j);
            if let Some(x) = self.interior_stationary_point(weights, j, lo, hi) {
                found.push(Minimizer { location: x, value: self.population_value(weights, x)?, piece: j });
            }
            if j + 1 < self.intervals() {
                let left = self.population_grad_in(weights, j, hi);
                let right = self.population_grad_in(weights, j + 1, hi);
                if left < 0.0 && right > 0.0 {
                    found.push(Minimizer { location: hi, value: self.population_value(weights, hi)?, piece: j });
                }
            }
        }
        found.sort_by(|a, b| a.location.total_cmp(&b.location));
        found.dedup_by(|a, b| (a.location - b.location).abs() <= 1e-10);
        Ok(found)
    }

    fn interior_stationary_point(&self, weights: &[f64], j: usize, lo: f64, hi: f64) -> Option<f64> {
        let affine: Option<Vec<(f64, f64)>> = self.pieces.iter().map(|row| row[j].affine_grad()).collect();
        if let Some(parts) = affine {
            let (slope, intercept) = parts
                .iter()
                .zip(weights)
                .fold((0.0, 0.0), |(s, c), ((ps, pc), a)| (s + a * ps, c + a * pc));
            if slope <= 0.0 {
                return None;
            }
            let root = -intercept / slope;
            return (root > lo && root <= hi).then_some(root);
        }
        let grad = |t: f64| self.population_grad_in(weights, j, t);
        let (mut left, mut right) = bracket(lo, hi);
        let mut span = 1.0;
        while !lo.is_finite() && grad(left) >= 0.0 && span < 1e8 {
            span *= 2.0;
            left = right.min(hi) - span;
        }
        span = 1.0;
        while !hi.is_finite() && grad(right) <= 0.0 && span < 1e8 {
            span *= 2.0;
            right = left.max(lo) + span;
        }
        if !(grad(left) < 0.0 && grad(right) > 0.0) {
            return None;
        }
        // bisection on the monotone derivative
        for _ in 0..200 {
            let mid = 0.5 * (left + right);
            if grad(mid) < 0.0 {
                left = mid;
            } else {
                right = mid;
            }
            if right - left <= 1e-13 * (1.0 + mid.abs()) {
                break;
            }
        }
        Some(0.5 * (left + right))
    }
}

fn bracket(lo: f64, hi: f64) -> (f64, f64) {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => (lo, hi),
        (true, false) => (lo, lo + 1.0),
        (false, true) => (hi - 1.0, hi),
        (false, false) => (-1.0, 1.0),
    }
}

/// Axis-aligned box `lower < x <= upper` (coordinate-wise, bounds may be
/// infinite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidLoss("box lower bounds must be below upper bounds".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| v > l && v <= u)
    }

    fn strictly_contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| v > l && v < u)
    }

    fn overlaps(&self, other: &BoxRegion) -> bool {
        (0..self.dim()).all(|k| self.lower[k] < other.upper[k] && other.lower[k] < self.upper[k])
    }
}

/// One region of the multi-dimensional family:
/// `V_i(theta) = slope * ||theta - minimizer||_1 - offset` inside `bounds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Region {
    pub bounds: BoxRegion,
    pub slope: f64,
    pub offset: f64,
    pub minimizer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimizerMultiD {
    pub location: Vec<f64>,
    pub value: f64,
    pub region: usize,
}

/// Multi-dimensional grouped L1 loss: group `i` is active on region `i` and
/// equals `epsilon * ||theta - theta_i*||_1` outside it.
#[derive(Debug, Clone)]
pub struct GroupedLossMultiD {
    dim: usize,
    regions: Vec<L1Region>,
    epsilon: f64,
}

fn sign_left(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn l1(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
}

impl GroupedLossMultiD {
    pub fn new(regions: Vec<L1Region>, epsilon: f64) -> Result<Self> {
        let dim = regions
            .first()
            .map(|r| r.bounds.dim())
            .ok_or_else(|| Error::InvalidLoss("no regions".into()))?;
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidLoss(format!("epsilon {epsilon} must be >= 0")));
        }
        for (i, r) in regions.iter().enumerate() {
            if r.bounds.dim() != dim || r.minimizer.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.minimizer.len() });
            }
            if !(r.slope > 0.0) {
                return Err(Error::InvalidLoss(format!("region {i} slope must be > 0")));
            }
            if !r.bounds.strictly_contains(&r.minimizer) {
                return Err(Error::InvalidLoss(format!(
                    "region {i} minimizer lies outside the interior of its box"
                )));
            }
            for (j, other) in regions.iter().enumerate().skip(i + 1) {
                if r.bounds.overlaps(&other.bounds) {
                    return Err(Error::InvalidLoss(format!("regions {i} and {j} overlap")));
                }
            }
        }
        Ok(Self { dim, regions, epsilon })
    }

    /// Two half-spaces split at `theta_0 = 0` with minimizers at `(-1, 0, ..)`
    /// and `(1, 0, ..)`, shared slope and offset.
    pub fn two_region_example(dim: usize, slope: f64, offset: f64, epsilon: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidLoss("dimension must be >= 1".into()));
        }
        let mut left_upper = vec![f64::INFINITY; dim];
        left_upper[0] = 0.0;
        let mut right_lower = vec![f64::NEG_INFINITY; dim];
        right_lower[0] = 0.0;
        let mut m1 = vec![0.0; dim];
        m1[0] = -1.0;
        let mut m2 = vec![0.0; dim];
        m2[0] = 1.0;
        let regions = vec![
            L1Region {
                bounds: BoxRegion::new(vec![f64::NEG_INFINITY; dim], left_upper)?,
                slope,
                offset,
                minimizer: m1,
            },
            L1Region {
                bounds: BoxRegion::new(right_lower, vec![f64::INFINITY; dim])?,
                slope,
                offset,
                minimizer: m2,
            },
        ];
        Self::new(regions, epsilon)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[L1Region] {
        &self.regions
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn region_of(&self, theta: &[f64]) -> Option<usize> {
        self.regions.iter().position(|r| r.bounds.contains(theta))
    }

    fn check_point(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: theta.len() });
        }
        Ok(())
    }

    pub fn group_value(&self, group: usize, theta: &[f64]) -> Result<f64> {
        self.check_point(theta)?;
        let r = self
            .regions
            .get(group)
            .ok_or(Error::InvalidGroup { index: group, groups: self.groups() })?;
        let dist = l1(theta, &r.minimizer);
        Ok(if r.bounds.contains(theta) { r.slope * dist - r.offset } else { self.epsilon * dist })
    }

    pub fn group_grad(&self, group: usize, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_point(theta)?;
        let r = self
            .regions
            .get(group)
            .ok_or(Error::InvalidGroup { index: group, groups: self.groups() })?;
        let scale = if r.bounds.contains(theta) { r.slope } else { self.epsilon };
        Ok(theta.iter().zip(&r.minimizer).map(|(t, m)| scale * sign_left(t - m)).collect())
    }

    pub fn population_value(&self, weights: &[f64], theta: &[f64]) -> Result<f64> {
        if weights.len() != self.groups() {
            return Err(Error::DimensionMismatch { expected: self.groups(), got: weights.len() });
        }
        let mut total = 0.0;
        for (g, a) in weights.iter().enumerate() {
            total += a * self.group_value(g, theta)?;
        }
        Ok(total)
    }

    /// One minimizer per region: `theta_i*` (the epsilon terms are ignored
    /// for the location).
    pub fn local_minimizers(&self, weights: &[f64]) -> Result<Vec<MinimizerMultiD>> {
        self.regions
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(MinimizerMultiD {
                    location: r.minimizer.clone(),
                    value: self.population_value(weights, &r.minimizer)?,
                    region: i,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eq6_v1(t: f64) -> f64 {
        if t <= 0.0 {
            0.5 * (t + 1.0).powi(2) - 0.5
        } else {
            0.0
        }
    }

    fn eq6_v2(t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            0.5 * (t - 1.0).powi(2) - 0.5
        }
    }

    #[test]
    fn proportions_validation() {
        assert!(Proportions::two(0.4, 0.6).is_ok());
        assert!(Proportions::two(0.0, 1.0).is_err());
        assert!(Proportions::two(0.5, 0.6).is_err());
        assert!(Proportions::new(vec![]).is_err());
        assert!(Proportions::new(vec![0.2, 0.3, 0.5]).is_ok());
    }

    #[test]
    fn quadratic_example_values() {
        let loss = GroupedLoss1D::quadratic_example();
        assert_eq!(loss.group_value(0, -1.0).unwrap(), -0.5);
        assert_eq!(loss.group_value(0, 0.5).unwrap(), 0.0);
        assert_eq!(loss.group_grad(0, -0.5).unwrap(), 0.5);
        assert_eq!(loss.group_grad(1, -0.5).unwrap(), 0.0);
        assert!(matches!(loss.group_value(2, 0.0), Err(Error::InvalidGroup { .. })));
    }

    #[test]
    fn linear_example_values() {
        let loss = GroupedLoss1D::linear_example(0.1).unwrap();
        assert!((loss.group_value(1, -1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((loss.group_grad(0, 0.5).unwrap() - 0.1).abs() < 1e-15);
        // left piece owns the breakpoint
        assert_eq!(loss.group_grad(0, -1.0).unwrap(), -1.0);
        assert_eq!(loss.group_grad(0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn population_value_examples() {
        let loss = GroupedLoss1D::linear_example(0.0).unwrap();
        assert!((loss.population_value(&[0.4, 0.6], 1.0).unwrap() + 0.6).abs() < 1e-15);
        assert!((loss.population_value(&[0.4, 0.6], -1.0).unwrap() + 0.4).abs() < 1e-15);
        let q = GroupedLoss1D::quadratic_example();
        for t in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            assert_eq!(q.population_value(&[1.0, 0.0], t).unwrap(), q.group_value(0, t).unwrap());
        }
        assert!(matches!(
            q.population_value(&[1.0], 0.0),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn continuity_at_breakpoints() {
        let losses = [
            GroupedLoss1D::quadratic_example(),
            GroupedLoss1D::linear_example(0.1).unwrap(),
            GroupedLoss1D::general_convex(
                vec![0.0],
                vec![
                    ConvexPiece::power(1.0, -1.0, -1.0, 1.5).unwrap(),
                    ConvexPiece::power(1.0, 1.0, -1.0, 1.5).unwrap(),
                ],
                0.1,
            )
            .unwrap(),
        ];
        for loss in &losses {
            for (j, &xi) in loss.breakpoints().iter().enumerate() {
                for g in 0..loss.groups() {
                    let l = loss.piece(g, j).unwrap().value(xi);
                    let r = loss.piece(g, j + 1).unwrap().value(xi);
                    assert!((l - r).abs() <= 1e-12, "group {g} at {xi}");
                }
            }
        }
    }

    #[test]
    fn discontinuous_loss_rejected() {
        let pieces = vec![vec![Piece::zero(), Piece::Linear { slope: 0.0, offset: 1.0 }]];
        assert!(GroupedLoss1D::new(vec![0.0], pieces, 0.0).is_err());
    }

    #[test]
    fn constructor_matches_hand_coded_quadratic() {
        use rand::{Rng, SeedableRng};
        let loss = GroupedLoss1D::quadratic_example();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t: f64 = rng.random_range(-5.0..5.0);
            assert_eq!(loss.group_value(0, t).unwrap(), eq6_v1(t));
            assert_eq!(loss.group_value(1, t).unwrap(), eq6_v2(t));
        }
        assert_eq!(loss.group_value(0, 0.0).unwrap(), eq6_v1(0.0));
    }

    #[test]
    fn minimizers_quadratic() {
        let loss = GroupedLoss1D::quadratic_example();
        let m = loss.local_minimizers(&[0.4, 0.6]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].location, -1.0);
        assert!((m[0].value + 0.2).abs() < 1e-15);
        assert_eq!(m[1].location, 1.0);
        assert!((m[1].value + 0.3).abs() < 1e-15);
        assert_eq!((m[0].piece, m[1].piece), (0, 1));
    }

    #[test]
    fn minimizers_linear() {
        let loss = GroupedLoss1D::linear_example(0.1).unwrap();
        let m = loss.local_minimizers(&[0.4, 0.6]).unwrap();
        let locs: Vec<f64> = m.iter().map(|m| m.location).collect();
        assert_eq!(locs, vec![-1.0, 1.0]);
    }

    #[test]
    fn minimizers_general_convex_by_bisection() {
        let loss = GroupedLoss1D::general_convex(
            vec![0.0],
            vec![
                ConvexPiece::power(1.0, -1.0, -1.0, 1.5).unwrap(),
                ConvexPiece::power(1.0, 1.0, -1.0, 1.5).unwrap(),
            ],
            0.0,
        )
        .unwrap();
        let m = loss.local_minimizers(&[0.4, 0.6]).unwrap();
        assert_eq!(m.len(), 2);
        assert!((m[0].location + 1.0).abs() < 1e-10);
        assert!((m[1].location - 1.0).abs() < 1e-10);
        for mm in &m {
            // gradient changes sign across the minimizer
            let g_lo = loss.population_grad(&[0.4, 0.6], mm.location - 1e-6).unwrap();
            let g_hi = loss.population_grad(&[0.4, 0.6], mm.location + 1e-6).unwrap();
            assert!(g_lo < 0.0 && g_hi > 0.0);
        }
    }

    #[test]
    fn global_minimizer_ordering() {
        let a = [0.4, 0.6];
        for loss in [GroupedLoss1D::quadratic_example(), GroupedLoss1D::linear_example(0.1).unwrap()] {
            assert!(loss.population_value(&a, 1.0).unwrap() < loss.population_value(&a, -1.0).unwrap());
        }
    }

    #[test]
    fn multid_single_region() {
        let region = L1Region {
            bounds: BoxRegion::new(vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2]).unwrap(),
            slope: 2.0,
            offset: 1.0,
            minimizer: vec![0.5, -0.25],
        };
        let loss = GroupedLossMultiD::new(vec![region], 0.1).unwrap();
        let m = loss.local_minimizers(&[1.0]).unwrap();
        assert_eq!(m[0].location, vec![0.5, -0.25]);
        assert_eq!(m[0].value, -1.0);
    }

    #[test]
    fn multid_two_region_example() {
        let loss = GroupedLossMultiD::two_region_example(2, 1.0, 1.0, 0.1).unwrap();
        assert_eq!(loss.region_of(&[-0.5, 3.0]), Some(0));
        assert_eq!(loss.region_of(&[0.0, 3.0]), Some(0));
        assert_eq!(loss.region_of(&[0.1, -3.0]), Some(1));
        assert_eq!(loss.group_grad(0, &[-0.5, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(loss.group_grad(1, &[-0.5, 1.0]).unwrap(), vec![-0.1, 0.1]);
        assert_eq!(loss.group_value(0, &[-1.0, 0.0]).unwrap(), -1.0);
    }

    #[test]
    fn multid_rejects_overlap_and_outside_minimizer() {
        let whole = BoxRegion::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let r = L1Region { bounds: whole.clone(), slope: 1.0, offset: 1.0, minimizer: vec![0.0, 0.0] };
        assert!(GroupedLossMultiD::new(vec![r.clone(), r.clone()], 0.1).is_err());
        let outside = L1Region { minimizer: vec![1.0, 0.0], ..r };
        assert!(GroupedLossMultiD::new(vec![outside], 0.1).is_err());
    }
}

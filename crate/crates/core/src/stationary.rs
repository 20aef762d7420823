//! Stationary densities of the SDE approximating SGD, and closed-form
//! minimizer ratios.
//!
//! With drift `-mu` and diffusion `eta * Sigma`, zero probability flux
//! `mu p + (eta/2) (Sigma p)' = 0` gives, on every piece,
//!
//! ```text
//! q(theta) = Sigma p = C_j exp(-(2/eta) int_{anchor_j}^theta mu / Sigma)
//! ```
//!
//! Piece 0 is anchored at the first breakpoint, every other piece at its left
//! breakpoint, and the `C_j` are chained left to right so that `q` is
//! continuous. `Sigma` itself jumps at breakpoints, so `p` does too.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{GroupedLoss1D, GroupedLossMultiD, LossFamily, Piece, Proportions};
use crate::quad;
use crate::sampler::Scheme;

/// Absolute tolerance for exponent integrals.
const EXPONENT_TOL: f64 = 1e-13;
/// Boundary density relative to the maximum at which the auto domain stops.
const TRUNCATION: f64 = 1e-12;
const MAX_DOMAIN_DOUBLINGS: usize = 60;
/// Points per piece for the coarse scan that locates the maximum.
const COARSE_POINTS: usize = 400;
/// Largest change of `log q` inside one normalization chunk.
const CHUNK_LOG_SPAN: f64 = 1.0;
const CHUNK_MAX_CELLS: usize = 64;
const MIN_CELLS: usize = 16;

/// Drift mean and gradient variance of one scheme, piece by piece.
#[derive(Debug, Clone)]
pub struct PiecewiseDiffusion {
    breakpoints: Vec<f64>,
    /// `columns[j][g]`: group `g`'s piece on interval `j`.
    columns: Vec<Vec<Piece>>,
    a: Vec<f64>,
    /// Second-moment coefficient per group: `a_g` or `a_g^2 / f_g`.
    second: Vec<f64>,
    scheme: Scheme,
    eta: f64,
}

impl PiecewiseDiffusion {
    pub fn new(loss: &GroupedLoss1D, scheme: Scheme, a: &Proportions, f: &Proportions, eta: f64) -> Result<Self> {
        for got in [a.len(), f.len()] {
            if got != loss.groups() {
                return Err(Error::DimensionMismatch { expected: loss.groups(), got });
            }
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta = {eta} must be > 0")));
        }
        let columns = (0..loss.intervals())
            .map(|j| (0..loss.groups()).map(|g| loss.piece(g, j).cloned()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let second = match scheme {
            Scheme::Resampling => a.to_vec(),
            Scheme::Reweighting => a.iter().zip(f.iter()).map(|(ai, fi)| ai * ai / fi).collect(),
        };
        Ok(Self { breakpoints: loss.breakpoints().to_vec(), columns, a: a.to_vec(), second, scheme, eta })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn intervals(&self) -> usize {
        self.columns.len()
    }

    pub fn interval_of(&self, theta: f64) -> usize {
        self.breakpoints.partition_point(|&b| b < theta)
    }

    /// `(mu, Sigma)` at `theta` using the pieces of interval `j`.
    #[inline]
    pub fn coefficients_in(&self, j: usize, theta: f64) -> (f64, f64) {
        let mut mean = 0.0;
        let mut second = 0.0;
        for ((piece, a), c) in self.columns[j].iter().zip(&self.a).zip(&self.second) {
            let g = piece.grad(theta);
            mean += a * g;
            second += c * g * g;
        }
        (mean, second - mean * mean)
    }

    /// `(mu, Sigma)` at `theta` with breakpoints owned by the left piece.
    pub fn coefficients(&self, theta: f64) -> (f64, f64) {
        self.coefficients_in(self.interval_of(theta), theta)
    }

    /// Where the exponent integral of interval `j` starts.
    pub fn anchor(&self, j: usize) -> f64 {
        match self.breakpoints.first() {
            None => 0.0,
            Some(&b0) if j == 0 => b0,
            Some(_) => self.breakpoints[j - 1],
        }
    }

    /// `-(2/eta) int_x^y mu/Sigma` on interval `j`.
    fn exponent(&self, j: usize, x: f64, y: f64) -> Result<f64> {
        let v = quad::integrate(
            |t| {
                let (m, s) = self.coefficients_in(j, t);
                if s > 0.0 {
                    m / s
                } else {
                    f64::NAN
                }
            },
            x,
            y,
            EXPONENT_TOL,
        )
        .map_err(|e| self.variance_error(j, x, y).unwrap_or(e))?;
        Ok(-2.0 / self.eta * v)
    }

    /// Non-positive variance anywhere on `[x, y]` of piece `j`, if sampled.
    fn variance_error(&self, j: usize, x: f64, y: f64) -> Option<Error> {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        (0..=64)
            .map(|k| lo + (hi - lo) * k as f64 / 64.0)
            .find(|&t| !(self.coefficients_in(j, t).1 > 0.0))
            .map(|theta| Error::NonPositiveVariance { theta })
    }

    fn check_variance(&self, j: usize, x: f64, y: f64) -> Result<()> {
        match self.variance_error(j, x, y) {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityOptions {
    /// Fixed `[L, U]`; `None` extends until the boundary density falls
    /// below `1e-12` of the maximum.
    pub domain: Option<(f64, f64)>,
    pub grid_size: usize,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self { domain: None, grid_size: 10_000 }
    }
}

/// One piece of the density restricted to the domain, sampled on its own
/// uniform grid.
#[derive(Debug, Clone, Serialize)]
pub struct DensitySegment {
    pub interval: usize,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    /// `lo + k * step`; `lo` is kept even when owned by the previous piece.
    pub nodes: Vec<f64>,
    /// Unnormalized `log q` at the nodes.
    pub log_q: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StationaryDensity {
    #[serde(skip)]
    diffusion: PiecewiseDiffusion,
    pub domain: (f64, f64),
    /// `log C_j` for every interval of the loss (also those outside the
    /// domain).
    pub log_c: Vec<f64>,
    pub segments: Vec<DensitySegment>,
    /// `log` of the normalizer, so that `p = q / Sigma / exp(log_z)`.
    pub log_z: f64,
    /// Exponential-envelope estimate of the mass outside the domain.
    pub tail_bound: f64,
}

impl StationaryDensity {
    pub fn diffusion(&self) -> &PiecewiseDiffusion {
        &self.diffusion
    }

    pub fn eta(&self) -> f64 {
        self.diffusion.eta
    }

    /// Unnormalized `log q` on interval `j`, integrating from the nearest
    /// stored node when possible.
    fn log_q_in(&self, j: usize, theta: f64) -> Result<f64> {
        if let Some(seg) = self.segments.iter().find(|s| s.interval == j && theta >= s.lo && theta <= s.hi) {
            let k = (((theta - seg.lo) / seg.step).floor() as usize).min(seg.nodes.len() - 1);
            return Ok(seg.log_q[k] + self.diffusion.exponent(j, seg.nodes[k], theta)?);
        }
        Ok(self.log_c[j] + self.diffusion.exponent(j, self.diffusion.anchor(j), theta)?)
    }

    fn density_in(&self, j: usize, theta: f64) -> Result<f64> {
        let (_, s) = self.diffusion.coefficients_in(j, theta);
        Ok((self.log_q_in(j, theta)? - self.log_z).exp() / s)
    }

    /// `p(theta)`; at a breakpoint the left piece's value.
    pub fn eval(&self, theta: f64) -> Result<f64> {
        self.density_in(self.diffusion.interval_of(theta), theta)
    }

    /// `p(theta)`, except at a breakpoint where the geometric mean of the two
    /// one-sided limits is used. Point values at kinks are otherwise tied to
    /// the ownership convention, which breaks mirror symmetry.
    pub fn eval_point(&self, theta: f64) -> Result<f64> {
        if self.diffusion.breakpoints.contains(&theta) {
            Ok((self.eval(theta)? * self.eval_right(theta)?).sqrt())
        } else {
            self.eval(theta)
        }
    }

    /// `p(x) / p(y)` using [`Self::eval_point`].
    pub fn point_ratio(&self, x: f64, y: f64) -> Result<f64> {
        Ok(self.eval_point(x)? / self.eval_point(y)?)
    }

    /// `p` at `theta` using the piece to the right of a breakpoint.
    pub fn eval_right(&self, theta: f64) -> Result<f64> {
        let j = self.diffusion.interval_of(theta);
        let j = if self.diffusion.breakpoints.get(j) == Some(&theta) { j + 1 } else { j };
        self.density_in(j, theta)
    }

    /// Grid over the domain. Breakpoints appear once, with the left piece.
    pub fn grid(&self) -> Vec<f64> {
        self.exported().map(|(_, _, t, _)| t).collect()
    }

    /// Density values on [`Self::grid`].
    pub fn values(&self) -> Vec<f64> {
        self.exported().map(|(seg, k, _, _)| self.node_density(seg, k)).collect()
    }

    /// `(theta, p)` pairs on the grid.
    pub fn table(&self) -> Vec<(f64, f64)> {
        self.grid().into_iter().zip(self.values()).collect()
    }

    fn exported(&self) -> impl Iterator<Item = (&DensitySegment, usize, f64, f64)> + '_ {
        self.segments.iter().flat_map(move |seg| {
            let skip = usize::from(seg.interval > 0 && self.diffusion.breakpoints.get(seg.interval - 1) == Some(&seg.lo));
            seg.nodes.iter().enumerate().skip(skip).map(move |(k, &t)| (seg, k, t, seg.log_q[k]))
        })
    }

    fn node_density(&self, seg: &DensitySegment, k: usize) -> f64 {
        let (_, s) = self.diffusion.coefficients_in(seg.interval, seg.nodes[k]);
        (seg.log_q[k] - self.log_z).exp() / s
    }

    /// Composite Simpson integral of `g * p` over every segment (with a 3/8
    /// panel closing segments that have an odd number of cells).
    pub fn integrate_against(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.segments
            .iter()
            .map(|seg| {
                let y: Vec<f64> = (0..seg.nodes.len()).map(|k| g(seg.nodes[k]) * self.node_density(seg, k)).collect();
                simpson(&y, seg.step)
            })
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.integrate_against(|_| 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.integrate_against(|t| t) / self.total_mass()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.integrate_against(|t| (t - m) * (t - m)) / self.total_mass()
    }

    /// `(left, right)` limits of `q = Sigma p` at breakpoint `i`, read from the
    /// stored segments.
    pub fn sigma_p_limits(&self, i: usize) -> Option<(f64, f64)> {
        let b = *self.diffusion.breakpoints.get(i)?;
        let left = self.segments.iter().find(|s| s.interval == i && s.hi == b)?;
        let right = self.segments.iter().find(|s| s.interval == i + 1 && s.lo == b)?;
        let ql = (left.log_q.last()? - self.log_z).exp();
        let qr = (right.log_q[0] - self.log_z).exp();
        Some((ql, qr))
    }

    /// Largest relative jump of `Sigma p` over breakpoints inside the domain.
    pub fn sigma_p_continuity(&self) -> f64 {
        (0..self.diffusion.breakpoints.len())
            .filter_map(|i| self.sigma_p_limits(i))
            .map(|(l, r)| (l - r).abs() / l.max(r))
            .fold(0.0, f64::max)
    }

    /// `p(b+) / p(b-)` at breakpoint `i`.
    pub fn jump_ratio(&self, i: usize) -> Result<f64> {
        let b = *self
            .diffusion
            .breakpoints
            .get(i)
            .ok_or_else(|| Error::InvalidConfig(format!("no breakpoint {i}")))?;
        Ok(self.eval_right(b)? / self.eval(b)?)
    }

    /// Multiplies piece `interval` by `factor` without re-matching. Only
    /// useful to build corrupted densities for negative controls.
    pub fn rescale_piece(&mut self, interval: usize, factor: f64) {
        let shift = factor.ln();
        if let Some(c) = self.log_c.get_mut(interval) {
            *c += shift;
        }
        for seg in self.segments.iter_mut().filter(|s| s.interval == interval) {
            seg.log_q.iter_mut().for_each(|v| *v += shift);
        }
    }
}

/// Builds the stationary density on a truncated domain.
pub fn stationary_density(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    opts: DensityOptions,
) -> Result<StationaryDensity> {
    if opts.grid_size < 2 * MIN_CELLS {
        return Err(Error::InvalidConfig(format!("grid size {} too small", opts.grid_size)));
    }
    let diff = PiecewiseDiffusion::new(loss, scheme, a, f, eta)?;
    let bps = diff.breakpoints.clone();

    // chain the piece constants across the finite pieces
    let mut log_c = vec![0.0; diff.intervals()];
    for j in 1..diff.intervals() {
        let prev = j - 1;
        let (x, y) = (diff.anchor(prev), bps[prev]);
        diff.check_variance(prev, x, y)?;
        log_c[j] = log_c[prev] + diff.exponent(prev, x, y)?;
    }
    let log_p = |theta: f64| -> Result<f64> {
        let j = diff.interval_of(theta);
        let (_, s) = diff.coefficients_in(j, theta);
        if !(s > 0.0) {
            return Err(Error::NonPositiveVariance { theta });
        }
        Ok(log_c[j] + diff.exponent(j, diff.anchor(j), theta)? - s.ln())
    };

    let (lo, hi) = match opts.domain {
        Some((lo, hi)) => {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::InvalidConfig(format!("bad domain [{lo}, {hi}]")));
            }
            (lo, hi)
        }
        None => auto_domain(loss, a, &diff, &log_p)?,
    };

    // segments and the cell budget
    let mut spans = Vec::new();
    for j in 0..diff.intervals() {
        let (l, h) = interval_bounds(&bps, j);
        let (l, h) = (l.max(lo), h.min(hi));
        if l < h {
            diff.check_variance(j, l, h)?;
            spans.push((j, l, h));
        }
    }
    let coarse: Vec<(Vec<f64>, Vec<f64>)> = spans
        .iter()
        .map(|&(j, l, h)| profile(&diff, &log_c, j, l, h, COARSE_POINTS))
        .collect::<Result<_>>()?;
    let variation: Vec<f64> = coarse
        .iter()
        .map(|(_, lq)| lq.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
        .collect();
    let cells = allocate_cells(&spans, &variation, opts.grid_size, hi - lo);

    let mut segments = Vec::with_capacity(spans.len());
    for (&(j, l, h), &n) in spans.iter().zip(&cells) {
        let (nodes, log_q) = profile(&diff, &log_c, j, l, h, n)?;
        segments.push(DensitySegment { interval: j, lo: l, hi: h, step: (h - l) / n as f64, nodes, log_q });
    }

    let max_log_p = segments
        .iter()
        .flat_map(|s| {
            let diff = &diff;
            s.nodes.iter().zip(&s.log_q).map(move |(&t, &lq)| lq - diff.coefficients_in(s.interval, t).1.ln())
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for seg in &segments {
        z += segment_mass(&diff, seg, max_log_p)?;
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Normalization(format!("normalizer {z} on [{lo}, {hi}]")));
    }
    let log_z = max_log_p + z.ln();

    let mut density = StationaryDensity { diffusion: diff, domain: (lo, hi), log_c, segments, log_z, tail_bound: 0.0 };
    density.tail_bound = tail_bound(&density);
    if opts.domain.is_none() && !density.tail_bound.is_finite() {
        return Err(Error::Normalization("density does not decay at the domain ends".into()));
    }
    Ok(density)
}

/// Composite Simpson on equally spaced samples; an odd cell count ends with
/// Simpson's 3/8 rule over the last three cells.
fn simpson(y: &[f64], h: f64) -> f64 {
    let n = y.len() - 1;
    match n {
        0 => 0.0,
        1 => 0.5 * h * (y[0] + y[1]),
        _ => {
            let (even_part, tail) = if n.is_multiple_of(2) { (n, 0.0) } else { (n - 3, 3.0 * h / 8.0 * (y[n - 3] + 3.0 * y[n - 2] + 3.0 * y[n - 1] + y[n])) };
            let mut sum = y[0] + y[even_part];
            for (k, yk) in y.iter().enumerate().take(even_part).skip(1) {
                sum += if k % 2 == 1 { 4.0 * yk } else { 2.0 * yk };
            }
            let head = if even_part > 0 { sum * h / 3.0 } else { 0.0 };
            head + tail
        }
    }
}

fn interval_bounds(bps: &[f64], j: usize) -> (f64, f64) {
    let lo = if j == 0 { f64::NEG_INFINITY } else { bps[j - 1] };
    let hi = bps.get(j).copied().unwrap_or(f64::INFINITY);
    (lo, hi)
}

/// Nodes `lo + k h`, `k = 0..=n`, and cumulative `log q` along them.
fn profile(diff: &PiecewiseDiffusion, log_c: &[f64], j: usize, lo: f64, hi: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = (hi - lo) / n as f64;
    let nodes: Vec<f64> = (0..=n).map(|k| if k == n { hi } else { lo + k as f64 * h }).collect();
    let mut log_q = Vec::with_capacity(n + 1);
    let mut cur = log_c[j] + diff.exponent(j, diff.anchor(j), lo)?;
    log_q.push(cur);
    for w in nodes.windows(2) {
        cur += diff.exponent(j, w[0], w[1])?;
        log_q.push(cur);
    }
    Ok((nodes, log_q))
}

/// Cell counts summing to `total - 1`, split by width and by `log q`
/// variation so that steep pieces get fine spacing.
fn allocate_cells(spans: &[(usize, f64, f64)], variation: &[f64], total: usize, width: f64) -> Vec<usize> {
    let vsum: f64 = variation.iter().sum();
    let weights: Vec<f64> = spans
        .iter()
        .zip(variation)
        .map(|(&(_, l, h), &v)| (h - l) / width + if vsum > 0.0 { v / vsum } else { 0.0 })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let budget = total - 1;
    let mut cells: Vec<usize> = weights
        .iter()
        .map(|w| {
            let n = ((budget as f64) * w / wsum) as usize;
            n.max(MIN_CELLS)
        })
        .collect();
    // the rounding remainder goes to the largest piece
    let used: usize = cells.iter().sum();
    let big = (0..cells.len()).max_by_key(|&i| cells[i]).unwrap_or(0);
    if used < budget {
        cells[big] += budget - used;
    } else {
        cells[big] = cells[big].saturating_sub(used - budget).max(MIN_CELLS);
    }
    cells
}

/// `int exp(log p - shift)` over one segment, in chunks of bounded `log q`
/// change. The exponent inside a cell is integrated from the cell's node.
fn segment_mass(diff: &PiecewiseDiffusion, seg: &DensitySegment, shift: f64) -> Result<f64> {
    let j = seg.interval;
    let integrand = |theta: f64| -> f64 {
        let k = (((theta - seg.lo) / seg.step).floor().max(0.0) as usize).min(seg.nodes.len() - 2);
        let (_, s) = diff.coefficients_in(j, theta);
        match diff.exponent(j, seg.nodes[k], theta) {
            Ok(e) => (seg.log_q[k] + e - shift).exp() / s,
            Err(_) => f64::NAN,
        }
    };
    let mut total = 0.0;
    let mut start = 0;
    let n = seg.nodes.len() - 1;
    while start < n {
        let mut end = start + 1;
        while end < n
            && end - start < CHUNK_MAX_CELLS
            && (seg.log_q[end + 1] - seg.log_q[start]).abs() <= CHUNK_LOG_SPAN
        {
            end += 1;
        }
        let peak = (seg.log_q[start].max(seg.log_q[end]) - shift).exp();
        let tol = (1e-14 * (seg.nodes[end] - seg.nodes[start]) * peak).max(1e-300);
        total += quad::integrate(integrand, seg.nodes[start], seg.nodes[end], tol)?;
        start = end;
    }
    Ok(total)
}

/// Picks `[L, U]` covering every breakpoint and minimizer, widened until the
/// boundary density is below `TRUNCATION` of the maximum, then pulled back to
/// just below that level.
fn auto_domain(
    loss: &GroupedLoss1D,
    a: &Proportions,
    diff: &PiecewiseDiffusion,
    log_p: &dyn Fn(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    let mut core: Vec<f64> = diff.breakpoints.clone();
    core.extend(loss.local_minimizers(a)?.iter().map(|m| m.location));
    let (span_lo, span_hi) = if core.is_empty() {
        (-1.0, 1.0)
    } else {
        (core.iter().copied().fold(f64::INFINITY, f64::min), core.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    let scan = |l: f64, h: f64| -> Result<f64> {
        let mut m = f64::NEG_INFINITY;
        for k in 0..=COARSE_POINTS {
            m = m.max(log_p(l + (h - l) * k as f64 / COARSE_POINTS as f64)?);
        }
        for &b in &diff.breakpoints {
            if b >= l && b <= h {
                m = m.max(log_p(b)?);
            }
        }
        Ok(m)
    };
    let mut lo = span_lo - 1.0;
    let mut hi = span_hi + 1.0;
    let mut max = scan(lo, hi)?;
    let limit = TRUNCATION.ln();
    for _ in 0..MAX_DOMAIN_DOUBLINGS {
        if log_p(lo)? - max <= limit {
            break;
        }
        let next = span_lo - 2.0 * (span_lo - lo);
        max = max.max(scan(next, lo)?);
        lo = next;
    }
    for _ in 0..MAX_DOMAIN_DOUBLINGS {
        if log_p(hi)? - max <= limit {
            break;
        }
        let next = span_hi + 2.0 * (hi - span_hi);
        max = max.max(scan(hi, next)?);
        hi = next;
    }
    if log_p(lo)? - max > limit || log_p(hi)? - max > limit {
        return Err(Error::Normalization(format!("density still above {TRUNCATION} of its maximum on [{lo}, {hi}]")));
    }
    // pull each end back to where the density is just under the threshold
    let target = limit - 1.0;
    let thin = 0.01 * (span_hi - span_lo + 1.0);
    let pull = |outer: f64, inner: f64| -> Result<f64> {
        if log_p(inner)? - max <= target {
            return Ok(if outer < inner { inner - thin } else { inner + thin });
        }
        let (mut out, mut inn) = (outer, inner);
        for _ in 0..80 {
            let mid = 0.5 * (out + inn);
            if log_p(mid)? - max > target {
                inn = mid;
            } else {
                out = mid;
            }
        }
        Ok(out)
    };
    Ok((pull(lo, span_lo)?, pull(hi, span_hi)?))
}

/// `p(end) / kappa` at each truncated end, with `kappa` the outward decay
/// rate of `log p` there. Infinite if the density grows outward.
fn tail_bound(d: &StationaryDensity) -> f64 {
    let mut bound = 0.0;
    if let Some(first) = d.segments.first() {
        let p0 = d.node_density(first, 0);
        let p1 = d.node_density(first, 1);
        let kappa = (p1.ln() - p0.ln()) / first.step;
        bound += if kappa > 0.0 { p0 / kappa } else { f64::INFINITY };
    }
    if let Some(last) = d.segments.last() {
        let n = last.nodes.len() - 1;
        let p0 = d.node_density(last, n);
        let p1 = d.node_density(last, n - 1);
        let kappa = (p1.ln() - p0.ln()) / last.step;
        bound += if kappa > 0.0 { p0 / kappa } else { f64::INFINITY };
    }
    bound
}

/// Largest zero-flux violation `|mu p + (eta/2) (Sigma p)'|` on the grid.
///
/// Inside each piece the derivative is a 7-point centered difference
/// (sixth order); at breakpoints a jump of `Sigma p` counts as a point flux
/// `(eta/2) |q(b+) - q(b-)| / h`.
pub fn flux_residual(d: &StationaryDensity) -> f64 {
    let half_eta = 0.5 * d.eta();
    let mut worst: f64 = 0.0;
    for seg in &d.segments {
        let q: Vec<f64> = seg.log_q.iter().map(|lq| (lq - d.log_z).exp()).collect();
        let h = seg.step;
        for k in 3..q.len().saturating_sub(3) {
            let d1 = (q[k + 1] - q[k - 1]) / (2.0 * h);
            let d2 = (q[k + 2] - q[k - 2]) / (4.0 * h);
            let d3 = (q[k + 3] - q[k - 3]) / (6.0 * h);
            let dq = (15.0 * d1 - 6.0 * d2 + d3) / 10.0;
            let (mu, s) = d.diffusion.coefficients_in(seg.interval, seg.nodes[k]);
            worst = worst.max((mu * q[k] / s + half_eta * dq).abs());
        }
    }
    for i in 0..d.diffusion.breakpoints.len() {
        if let Some((ql, qr)) = d.sigma_p_limits(i) {
            let h = d
                .segments
                .iter()
                .filter(|s| s.interval == i || s.interval == i + 1)
                .map(|s| s.step)
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(half_eta * (qr - ql).abs() / h);
        }
    }
    worst
}

/// A predicted density ratio between two minimizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GibbsRatio {
    pub log_ratio: f64,
    pub ratio: f64,
}

impl GibbsRatio {
    fn from_log(log_ratio: f64) -> Self {
        Self { log_ratio, ratio: log_ratio.exp() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearRatio {
    pub ratio: GibbsRatio,
    /// Whether `f_2/f_1 <= (a_2/a_1) sqrt(V(-1)/V(1))` holds; only reported for
    /// reweighting.
    pub condition: Option<bool>,
}

/// Leading-order `p(1)/p(-1)` for the piecewise-linear example, with
/// `V(1) = -a_2` and `V(-1) = -a_1` (their `epsilon -> 0` values).
pub fn gibbs_ratio_linear(scheme: Scheme, a: &Proportions, f: &Proportions, eta: f64, epsilon: f64) -> Result<LinearRatio> {
    if a.len() != 2 || f.len() != 2 {
        return Err(Error::Unsupported("the linear example has two groups".into()));
    }
    if !(eta > 0.0) || !(epsilon >= 0.0) {
        return Err(Error::InvalidConfig(format!("need eta > 0 and epsilon >= 0, got {eta}, {epsilon}")));
    }
    let (a1, a2, f1, f2) = (a[0], a[1], f[0], f[1]);
    let (v_plus, v_minus) = (-a2, -a1);
    Ok(match scheme {
        Scheme::Resampling => LinearRatio {
            ratio: GibbsRatio::from_log(-2.0 / (a1 * a2 * eta) * (v_plus - v_minus)),
            condition: None,
        },
        Scheme::Reweighting => {
            let prefactor = ((a1 * a1) / (f1 * f1)) / ((a2 * a2) / (f2 * f2));
            let exponent = -(2.0 * f2 / f1) / (a2 * a2 * eta) * v_plus + (2.0 * f1 / f2) / (a1 * a1 * eta) * v_minus;
            LinearRatio {
                ratio: GibbsRatio::from_log(prefactor.ln() + exponent),
                condition: Some(f2 / f1 <= (a2 / a1) * (v_minus / v_plus).sqrt()),
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BarrierOptions {
    /// Cutoff above a minimizer where `1/h'` is singular.
    pub delta: f64,
    /// Relative tolerance of the assumption checks.
    pub tol: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self { delta: 1e-6, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralRatio {
    pub ratio: GibbsRatio,
    /// `int_{theta_p*}^{theta_p} dtheta / h_p'`, common to all pieces.
    pub barrier: f64,
    pub minimizers: Vec<f64>,
}

/// `int 1/|h'|` from `start` (a minimizer) to `end`, with a shrinking cutoff
/// at `start`. Reports [`Error::Singular`] when the cutoff sequence does not
/// converge geometrically.
pub fn barrier_integral(dh: impl Fn(f64) -> f64, start: f64, end: f64, delta: f64) -> Result<f64> {
    let dir = (end - start).signum();
    let at = |cut: f64| quad::integrate(|t| 1.0 / dh(t).abs(), start + dir * cut, end, 1e-13).map(f64::abs);
    let i1 = at(delta)?;
    let i2 = at(delta / 10.0)?;
    let i3 = at(delta / 100.0)?;
    let (d1, d2) = (i2 - i1, i3 - i2);
    if d1.abs() <= 1e-14 * i3.abs().max(1.0) {
        return Ok(i3);
    }
    let r = d2 / d1;
    if !(r > 0.0 && r < 0.95) {
        return Err(Error::Singular(format!(
            "int 1/|h'| from {start} does not converge as the cutoff shrinks (successive ratio {r:.4})"
        )));
    }
    Ok(i3 + d2 * r / (1.0 - r))
}

fn convex_shape(loss: &GroupedLoss1D, i: usize) -> Result<&crate::loss::ConvexPiece> {
    match loss.piece(i, i)? {
        Piece::Convex(c) => Ok(c),
        _ => Err(Error::Unsupported(format!("group {i} has no convex shape on its own interval"))),
    }
}

fn shape_minimizer(h: &crate::loss::ConvexPiece, lo: f64, hi: f64) -> Result<f64> {
    if let Some(m) = h.known_minimizer() {
        return Ok(m);
    }
    let mut l = if lo.is_finite() { lo } else { hi.min(0.0) - 1.0 };
    let mut r = if hi.is_finite() { hi } else { lo.max(0.0) + 1.0 };
    while h.derivative(l) > 0.0 && l > -1e8 {
        l = 2.0 * l - r;
    }
    while h.derivative(r) < 0.0 && r < 1e8 {
        r = 2.0 * r - l;
    }
    if !(h.derivative(l) <= 0.0 && h.derivative(r) >= 0.0) {
        return Err(Error::AssumptionViolated(format!("no minimizer found for {}", h.label())));
    }
    for _ in 0..200 {
        let m = 0.5 * (l + r);
        if h.derivative(m) < 0.0 {
            l = m;
        } else {
            r = m;
        }
    }
    Ok(0.5 * (l + r))
}

fn close(x: f64, y: f64, tol: f64) -> bool {
    (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs()))
}

/// Leading-order `p(theta_p*) / p(theta_q*)` for the general convex family.
///
/// Checks that every shape has the same negative minimum value, that `|h'|`
/// is continuous at breakpoints and equal just beside every minimizer, and
/// that `int 1/|h'|` between each minimizer and each finite neighbouring
/// breakpoint is the same number.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_ratio_general(
    loss: &GroupedLoss1D,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    p: usize,
    q: usize,
    opts: BarrierOptions,
) -> Result<GeneralRatio> {
    if loss.family() != LossFamily::GeneralConvex {
        return Err(Error::Unsupported("gibbs_ratio_general needs a general convex loss".into()));
    }
    let k = loss.groups();
    for got in [a.len(), f.len()] {
        if got != k {
            return Err(Error::DimensionMismatch { expected: k, got });
        }
    }
    for idx in [p, q] {
        if idx >= k {
            return Err(Error::InvalidGroup { index: idx, groups: k });
        }
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidConfig(format!("eta = {eta} must be > 0")));
    }
    let bps = loss.breakpoints();
    let shapes: Vec<_> = (0..k).map(|i| convex_shape(loss, i)).collect::<Result<_>>()?;
    let mut minimizers = Vec::with_capacity(k);
    for (i, h) in shapes.iter().enumerate() {
        let (lo, hi) = interval_bounds(bps, i);
        let m = shape_minimizer(h, lo, hi)?;
        if !(m > lo && m < hi) {
            return Err(Error::AssumptionViolated(format!("minimizer {m} of group {i} is outside ({lo}, {hi})")));
        }
        minimizers.push(m);
    }

    let mut violations = Vec::new();
    let values: Vec<f64> = shapes.iter().zip(&minimizers).map(|(h, &m)| h.value(m)).collect();
    if values.iter().any(|&v| !(v < 0.0)) || values.iter().any(|&v| !close(v, values[0], opts.tol)) {
        violations.push(format!("h_i(theta_i*) equal and negative: {values:?}"));
    }
    for (i, &b) in bps.iter().enumerate() {
        let (l, r) = (shapes[i].derivative(b).abs(), shapes[i + 1].derivative(b).abs());
        if !close(l, r, opts.tol) {
            violations.push(format!("|h'| continuous at breakpoint {b}: {l} vs {r}"));
        }
    }
    let beside: Vec<(f64, f64)> = shapes
        .iter()
        .zip(&minimizers)
        .map(|(h, &m)| (h.derivative(m - opts.delta).abs(), h.derivative(m + opts.delta).abs()))
        .collect();
    if beside.iter().any(|&(l, r)| !close(l, beside[0].0, opts.tol) || !close(r, beside[0].1, opts.tol)) {
        violations.push(format!("|h'| equal beside the minimizers: {beside:?}"));
    }

    let mut barriers = Vec::new();
    for (i, h) in shapes.iter().enumerate() {
        let (lo, hi) = interval_bounds(bps, i);
        for end in [lo, hi] {
            if end.is_finite() {
                barriers.push((i, end, barrier_integral(|t| h.derivative(t), minimizers[i], end, opts.delta)?));
            }
        }
    }
    let Some(&(_, _, barrier)) = barriers.iter().find(|(i, _, _)| *i == p) else {
        return Err(Error::AssumptionViolated("a single piece has no finite barrier".into()));
    };
    if barriers.iter().any(|&(_, _, v)| !close(v, barrier, opts.tol)) {
        violations.push(format!("equal int 1/|h'| on every finite side: {barriers:?}"));
    }
    if !violations.is_empty() {
        return Err(Error::AssumptionViolated(violations.join("; ")));
    }

    let coef = |i: usize| match scheme {
        Scheme::Resampling => 1.0 / (1.0 - a[i]),
        Scheme::Reweighting => f[i] / (a[i] * (1.0 - f[i])),
    };
    Ok(GeneralRatio {
        ratio: GibbsRatio::from_log(2.0 / eta * barrier * (coef(p) - coef(q))),
        barrier,
        minimizers,
    })
}

/// Leading-order `p(theta_p*) / p(theta_q*)` for the multi-dimensional L1
/// family.
pub fn gibbs_ratio_multid(
    loss: &GroupedLossMultiD,
    scheme: Scheme,
    a: &Proportions,
    f: &Proportions,
    eta: f64,
    p: usize,
    q: usize,
) -> Result<GibbsRatio> {
    let k = loss.groups();
    for got in [a.len(), f.len()] {
        if got != k {
            return Err(Error::DimensionMismatch { expected: k, got });
        }
    }
    for idx in [p, q] {
        if idx >= k {
            return Err(Error::InvalidGroup { index: idx, groups: k });
        }
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidConfig(format!("eta = {eta} must be > 0")));
    }
    let term = |i: usize| {
        let r = &loss.regions()[i];
        let base = r.offset / (r.slope * r.slope);
        match scheme {
            Scheme::Resampling => base / (1.0 - a[i]),
            Scheme::Reweighting => f[i] * base / (a[i] * (1.0 - f[i])),
        }
    };
    Ok(GibbsRatio::from_log(2.0 / eta * (term(p) - term(q))))
}

//! Tabular off-policy TD(0) prediction on a ring MDP.
//!
//! States `0..n`, actions `-1` and `+1`, deterministic moves
//! `s' = (s + a) mod n`. A trajectory is generated by a behavior policy `mu`
//! and used to estimate the value of a target policy `pi`, either by weighting
//! each update with `pi/mu` or by redrawing stored transitions according to
//! `pi`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{RngStream, TD_STREAM_BASE};
use crate::sampler::Scheme;

pub const ACTIONS: [i32; 2] = [-1, 1];

fn action_index(a: i32) -> Result<usize> {
    match a {
        -1 => Ok(0),
        1 => Ok(1),
        _ => Err(Error::InvalidConfig(format!("action {a} is not -1 or +1"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RingMdp {
    reward: Vec<f64>,
    gamma: f64,
}

impl RingMdp {
    pub fn new(reward: Vec<f64>, gamma: f64) -> Result<Self> {
        if reward.is_empty() {
            return Err(Error::InvalidConfig("ring needs at least one state".into()));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidConfig("rewards must be finite".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidConfig(format!("gamma = {gamma} must lie in [0, 1)")));
        }
        Ok(Self { reward, gamma })
    }

    /// `r(s) = 1 + sin(2 pi s / n)`.
    pub fn sine(n: usize, gamma: f64) -> Result<Self> {
        let reward = (0..n).map(|s| 1.0 + (2.0 * std::f64::consts::PI * s as f64 / n as f64).sin()).collect();
        Self::new(reward, gamma)
    }

    pub fn states(&self) -> usize {
        self.reward.len()
    }

    pub fn reward(&self, s: usize) -> f64 {
        self.reward[s]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn next(&self, s: usize, a: i32) -> usize {
        let n = self.states() as i64;
        (s as i64 + a as i64).rem_euclid(n) as usize
    }
}

/// Per-state probabilities of `(-1, +1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Policy {
    probs: Vec<[f64; 2]>,
}

impl Policy {
    pub fn new(probs: Vec<[f64; 2]>) -> Result<Self> {
        for (s, p) in probs.iter().enumerate() {
            if p.iter().any(|x| !(0.0..=1.0).contains(x)) || (p[0] + p[1] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!("state {s}: action probabilities {p:?} invalid")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![[0.5, 0.5]; n] }
    }

    /// `mu(a|s) = 1/2 + c a` with `0 <= c < 1/2`.
    pub fn biased(n: usize, c: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&c) {
            return Err(Error::InvalidConfig(format!("behavior bias c = {c} must lie in [0, 1/2)")));
        }
        Ok(Self { probs: vec![[0.5 - c, 0.5 + c]; n] })
    }

    pub fn prob(&self, s: usize, a: i32) -> f64 {
        match a {
            -1 => self.probs[s][0],
            1 => self.probs[s][1],
            _ => 0.0,
        }
    }

    pub fn states(&self) -> usize {
        self.probs.len()
    }

    pub fn sample(&self, s: usize, rng: &mut RngStream) -> i32 {
        ACTIONS[rng.categorical(&self.probs[s])]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTable {
    pub values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn squared_distance(&self, other: &ValueTable) -> f64 {
        self.values.iter().zip(&other.values).map(|(x, y)| (x - y) * (x - y)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Transition {
    pub state: usize,
    pub action: i32,
    pub next: usize,
}

/// Logged transitions plus, per state and action, the indices of the
/// transitions that start there.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionLog {
    transitions: Vec<Transition>,
    by_state: Vec<[Vec<usize>; 2]>,
}

impl TransitionLog {
    pub fn new(states: usize) -> Self {
        Self { transitions: Vec::new(), by_state: vec![[Vec::new(), Vec::new()]; states] }
    }

    pub fn push(&mut self, mdp: &RingMdp, tr: Transition) -> Result<()> {
        let ai = action_index(tr.action)?;
        if tr.state >= mdp.states() || tr.next != mdp.next(tr.state, tr.action) {
            return Err(Error::InvalidConfig(format!("transition {tr:?} breaks the ring dynamics")));
        }
        self.by_state[tr.state][ai].push(self.transitions.len());
        self.transitions.push(tr);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Indices of stored transitions from `s` taking `a`.
    pub fn stored(&self, s: usize, a: i32) -> &[usize] {
        match action_index(a) {
            Ok(i) => &self.by_state[s][i],
            Err(_) => &[],
        }
    }
}

/// Solves `(I - gamma P_pi) V = R` by LU decomposition.
pub fn exact_value(mdp: &RingMdp, pi: &Policy) -> Result<ValueTable> {
    let n = mdp.states();
    if pi.states() != n {
        return Err(Error::DimensionMismatch { expected: n, got: pi.states() });
    }
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        for a in ACTIONS {
            m[(s, mdp.next(s, a))] -= mdp.gamma() * pi.prob(s, a);
        }
    }
    let r = DVector::from_column_slice(mdp.rewards());
    let v = m.clone().lu().solve(&r).ok_or(Error::SingularSystem)?;
    let residual = (&m * &v - &r).amax();
    if !(residual <= 1e-10 * (1.0 + r.amax())) {
        return Err(Error::SingularSystem);
    }
    Ok(ValueTable { values: v.iter().copied().collect() })
}

/// `steps` transitions under `mu` starting at `s0`.
pub fn generate_trajectory(mdp: &RingMdp, mu: &Policy, steps: usize, s0: usize, rng: &mut RngStream) -> Result<TransitionLog> {
    if s0 >= mdp.states() {
        return Err(Error::InvalidConfig(format!("start state {s0} outside 0..{}", mdp.states())));
    }
    let mut log = TransitionLog::new(mdp.states());
    let mut s = s0;
    for _ in 0..steps {
        let a = mu.sample(s, rng);
        let next = mdp.next(s, a);
        log.push(mdp, Transition { state: s, action: a, next })?;
        s = next;
    }
    Ok(log)
}

fn td_error(v: &ValueTable, mdp: &RingMdp, s: usize, next: usize) -> f64 {
    mdp.reward(s) + mdp.gamma() * v.values[next] - v.values[s]
}

/// `V(s) += eta (pi/mu) delta` for one logged transition.
pub fn td_reweighting(v: &mut ValueTable, mdp: &RingMdp, tr: &Transition, eta: f64, pi: &Policy, mu: &Policy) -> Result<()> {
    let b = mu.prob(tr.state, tr.action);
    if !(b > 0.0) {
        return Err(Error::ZeroBehaviorProbability { state: tr.state, action: tr.action });
    }
    let w = pi.prob(tr.state, tr.action) / b;
    v.values[tr.state] += eta * w * td_error(v, mdp, tr.state, tr.next);
    Ok(())
}

/// Draws `a ~ pi(.|s)`, picks a stored transition from `s` with that action
/// and applies the unweighted update to `V(s)`. When `a` was never logged at
/// `s`, the draw is repeated over the logged actions with `pi` renormalized.
pub fn td_resampling(
    v: &mut ValueTable,
    mdp: &RingMdp,
    log: &TransitionLog,
    s: usize,
    eta: f64,
    pi: &Policy,
    rng: &mut RngStream,
) -> Result<()> {
    let tr = resample_transition(log, s, pi, rng)?;
    v.values[s] += eta * td_error(v, mdp, s, tr.next);
    Ok(())
}

/// The transition [`td_resampling`] would use.
pub fn resample_transition(log: &TransitionLog, s: usize, pi: &Policy, rng: &mut RngStream) -> Result<Transition> {
    let mut a = pi.sample(s, rng);
    if log.stored(s, a).is_empty() {
        let probs: Vec<f64> = ACTIONS
            .iter()
            .map(|&b| if log.stored(s, b).is_empty() { 0.0 } else { pi.prob(s, b) })
            .collect();
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Empty(format!("no stored transition from state {s} has positive target probability")));
        }
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        a = ACTIONS[rng.categorical(&probs)];
    }
    let stored = log.stored(s, a);
    Ok(log.transitions[stored[rng.index_below(stored.len())]])
}

/// `E_{a ~ mu}[eta (pi/mu) delta]` at state `s`.
pub fn expected_update_reweighting(v: &ValueTable, mdp: &RingMdp, s: usize, eta: f64, pi: &Policy, mu: &Policy) -> f64 {
    ACTIONS
        .iter()
        .filter(|&&a| mu.prob(s, a) > 0.0)
        .map(|&a| mu.prob(s, a) * eta * pi.prob(s, a) / mu.prob(s, a) * td_error(v, mdp, s, mdp.next(s, a)))
        .sum()
}

/// `E_{a ~ pi}[eta delta]` at state `s`, with every action stored.
pub fn expected_update_resampling(v: &ValueTable, mdp: &RingMdp, s: usize, eta: f64, pi: &Policy) -> f64 {
    ACTIONS.iter().map(|&a| pi.prob(s, a) * eta * td_error(v, mdp, s, mdp.next(s, a))).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffPolicyConfig {
    /// Behavior bias `c` in `mu(a|s) = 1/2 + c a`.
    pub c: f64,
    /// Trajectory length `T`.
    pub steps: usize,
    pub eta: f64,
    pub passes: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub start: usize,
    /// Error samples per decade of updates.
    pub points_per_decade: usize,
}

impl OffPolicyConfig {
    pub fn new(scheme: Scheme, c: f64, steps: usize, eta: f64, seed: u64) -> Self {
        Self { c, steps, eta, passes: 1, seed, scheme, start: 0, points_per_decade: 20 }
    }

    pub fn validate(&self, states: usize) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..0.5).contains(&self.c) {
            problems.push(format!("c = {} must lie in [0, 1/2)", self.c));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            problems.push(format!("eta = {} must be > 0", self.eta));
        }
        if self.passes == 0 {
            problems.push("passes must be >= 1".into());
        }
        if self.start >= states {
            problems.push(format!("start state {} outside 0..{states}", self.start));
        }
        if self.points_per_decade == 0 {
            problems.push("points_per_decade must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorCurve {
    /// Update counts at which the error was recorded (starts at 0).
    pub steps: Vec<usize>,
    /// `||V_t - V_pi||^2`.
    pub errors: Vec<f64>,
    pub values: ValueTable,
}

impl ErrorCurve {
    pub fn initial(&self) -> f64 {
        self.errors[0]
    }

    pub fn last(&self) -> f64 {
        *self.errors.last().expect("curve holds e_0")
    }

    /// `log(e_t / e_0)`.
    pub fn log_relative(&self) -> Vec<f64> {
        self.errors.iter().map(|e| (e / self.errors[0]).ln()).collect()
    }
}

/// `0, 1, ...` then roughly `points_per_decade` log-spaced counts up to `total`.
pub fn log_schedule(total: usize, points_per_decade: usize) -> Vec<usize> {
    let mut out = vec![0];
    if total == 0 {
        return out;
    }
    let decades = (total as f64).log10();
    let n = (decades * points_per_decade as f64).ceil() as usize;
    for i in 0..=n {
        let t = (10f64.powf(i as f64 / points_per_decade as f64).round() as usize).min(total);
        if t > *out.last().unwrap() {
            out.push(t);
        }
    }
    if *out.last().unwrap() != total {
        out.push(total);
    }
    out
}

/// Learns `V_pi` from one behavior trajectory and records the error curve.
pub fn run_offpolicy(mdp: &RingMdp, pi: &Policy, cfg: &OffPolicyConfig) -> Result<ErrorCurve> {
    cfg.validate(mdp.states())?;
    let mu = Policy::biased(mdp.states(), cfg.c)?;
    let truth = exact_value(mdp, pi)?;
    let mut traj_rng = RngStream::new(cfg.seed, TD_STREAM_BASE);
    let mut draw_rng = RngStream::new(cfg.seed, TD_STREAM_BASE + 1);
    let log = generate_trajectory(mdp, &mu, cfg.steps, cfg.start, &mut traj_rng)?;

    let total = cfg.steps * cfg.passes;
    let schedule = log_schedule(total, cfg.points_per_decade);
    let mut next_record = 0;
    let mut v = ValueTable::zeros(mdp.states());
    let mut steps = Vec::with_capacity(schedule.len());
    let mut errors = Vec::with_capacity(schedule.len());
    let mut record = |t: usize, v: &ValueTable, next_record: &mut usize| {
        if *next_record < schedule.len() && schedule[*next_record] == t {
            steps.push(t);
            errors.push(v.squared_distance(&truth));
            *next_record += 1;
        }
    };
    record(0, &v, &mut next_record);
    let mut t = 0;
    for _ in 0..cfg.passes {
        for tr in log.transitions() {
            match cfg.scheme {
                Scheme::Reweighting => td_reweighting(&mut v, mdp, tr, cfg.eta, pi, &mu)?,
                Scheme::Resampling => td_resampling(&mut v, mdp, &log, tr.state, cfg.eta, pi, &mut draw_rng)?,
            }
            t += 1;
            if v.values[tr.state].is_nan() || v.values[tr.state].is_infinite() {
                return Err(Error::NonFinite { step: t });
            }
            record(t, &v, &mut next_record);
        }
    }
    Ok(ErrorCurve { steps, errors, values: v })
}

//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use biaslab::{Proportions, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    Fig1,
    Fig2,
    Fig4,
    SweepQuadratic,
    SweepLinear,
    StabilityTable,
    GibbsTable,
    VarianceCheck,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Fig1,
        Experiment::Fig2,
        Experiment::Fig4,
        Experiment::SweepQuadratic,
        Experiment::SweepLinear,
        Experiment::StabilityTable,
        Experiment::GibbsTable,
        Experiment::VarianceCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig1 => "fig1",
            Experiment::Fig2 => "fig2",
            Experiment::Fig4 => "fig4",
            Experiment::SweepQuadratic => "sweep-quadratic",
            Experiment::SweepLinear => "sweep-linear",
            Experiment::StabilityTable => "stability-table",
            Experiment::GibbsTable => "gibbs-table",
            Experiment::VarianceCheck => "variance-check",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Experiment::Fig1 => "quadratic example trajectories and basin fractions",
            Experiment::Fig2 => "piecewise-linear example trajectories and histograms",
            Experiment::Fig4 => "off-policy TD error curves on the ring MDP",
            Experiment::SweepQuadratic => "fig1 over a list of learning rates",
            Experiment::SweepLinear => "fig2 over a list of learning rates",
            Experiment::StabilityTable => "stability factors and critical learning rates",
            Experiment::GibbsTable => "stationary densities and minimizer ratios",
            Experiment::VarianceCheck => "closed-form vs Monte Carlo gradient variance",
        }
    }

    /// Experiments that run SGD ensembles and sweep over `eta`.
    pub fn is_sgd(self) -> bool {
        matches!(self, Experiment::Fig1 | Experiment::Fig2 | Experiment::SweepQuadratic | Experiment::SweepLinear)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
            format!("unknown experiment `{s}` (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Quadratic,
    Linear,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Quadratic => "quadratic",
            LossKind::Linear => "linear",
        }
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quadratic" => Ok(LossKind::Quadratic),
            "linear" => Ok(LossKind::Linear),
            _ => Err(format!("unknown loss `{s}` (expected quadratic or linear)")),
        }
    }
}

/// Every key accepted in config files and `--set`, with its meaning.
pub const KEYS: [(&str, &str); 21] = [
    ("experiment", "experiment name"),
    ("loss", "quadratic or linear"),
    ("epsilon", "O(epsilon) slope of the linear example"),
    ("schemes", "comma list of resampling, reweighting"),
    ("a", "population proportions, comma list summing to 1"),
    ("f", "sampling proportions, comma list summing to 1"),
    ("eta", "learning rate or ascending comma list"),
    ("theta0", "initial iterates (variance-check: evaluation points)"),
    ("steps", "SGD steps, or trajectory length T for fig4"),
    ("replicas", "ensemble size (fig4: seeds; variance-check: draws)"),
    ("seed", "base seed"),
    ("burn_in", "fraction of steps discarded from histograms"),
    ("radius", "basin radius around each minimizer"),
    ("hist_lo", "histogram lower edge"),
    ("hist_hi", "histogram upper edge"),
    ("bins", "histogram bin count"),
    ("grid", "stationary density grid size"),
    ("c", "behavior bias list for fig4"),
    ("states", "ring MDP size"),
    ("gamma", "discount factor"),
    ("out", "output directory"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub loss: LossKind,
    pub epsilon: f64,
    pub schemes: Vec<Scheme>,
    pub a: Vec<f64>,
    pub f: Vec<f64>,
    pub eta: Vec<f64>,
    pub theta0: Vec<f64>,
    pub steps: usize,
    pub replicas: usize,
    pub seed: u64,
    pub burn_in: f64,
    pub radius: f64,
    pub hist_lo: f64,
    pub hist_hi: f64,
    pub bins: usize,
    pub grid: usize,
    pub c: Vec<f64>,
    pub states: usize,
    pub gamma: f64,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            loss: LossKind::Quadratic,
            epsilon: 0.1,
            schemes: Scheme::ALL.to_vec(),
            a: vec![0.4, 0.6],
            f: vec![0.9, 0.1],
            eta: vec![0.5],
            theta0: vec![1.1, 2.0],
            steps: 200,
            replicas: 1000,
            seed: 0,
            burn_in: 0.5,
            radius: 0.1,
            hist_lo: -3.0,
            hist_hi: 3.0,
            bins: 120,
            grid: 10_000,
            c: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            states: 32,
            gamma: 0.9,
            out: PathBuf::from("out").join(experiment.name()),
        };
        let linear = Self { loss: LossKind::Linear, theta0: vec![0.9], steps: 10_000, replicas: 100, radius: 0.5, ..base.clone() };
        match experiment {
            Experiment::Fig1 => base,
            Experiment::SweepQuadratic => Self { eta: vec![0.3, 0.4, 0.5, 0.6], ..base },
            Experiment::Fig2 => Self { eta: vec![0.12], ..linear },
            Experiment::SweepLinear => Self { eta: vec![0.10, 0.11, 0.12, 0.13], ..linear },
            Experiment::Fig4 => Self { eta: vec![0.1], steps: 100_000, replicas: 10, ..base },
            Experiment::StabilityTable => Self { eta: vec![0.1, 0.2, 0.25, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0], ..base },
            Experiment::GibbsTable => Self { loss: LossKind::Linear, epsilon: 0.05, eta: vec![0.2, 0.3], ..base },
            Experiment::VarianceCheck => Self {
                theta0: vec![-1.5, -1.0, -0.5, 0.5, 1.0, 1.5],
                replicas: 100_000,
                ..base
            },
        }
    }

    /// Sets one key from its text form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let err = |e: String| format!("{key}: {e}");
        match key {
            "experiment" => {
                let e: Experiment = value.parse().map_err(err)?;
                if e != self.experiment {
                    return Err(format!("experiment: config names `{e}` but `{}` was requested", self.experiment));
                }
            }
            "loss" => self.loss = value.parse().map_err(err)?,
            "epsilon" => self.epsilon = parse_num(value).map_err(err)?,
            "schemes" => {
                self.schemes = split(value).map(|s| s.parse::<Scheme>().map_err(|e| e.to_string())).collect::<Result<_, _>>().map_err(err)?
            }
            "a" => self.a = parse_list(value).map_err(err)?,
            "f" => self.f = parse_list(value).map_err(err)?,
            "eta" => self.eta = parse_list(value).map_err(err)?,
            "theta0" => self.theta0 = parse_list(value).map_err(err)?,
            "steps" => self.steps = parse_num(value).map_err(err)?,
            "replicas" => self.replicas = parse_num(value).map_err(err)?,
            "seed" => self.seed = parse_num(value).map_err(err)?,
            "burn_in" => self.burn_in = parse_num(value).map_err(err)?,
            "radius" => self.radius = parse_num(value).map_err(err)?,
            "hist_lo" => self.hist_lo = parse_num(value).map_err(err)?,
            "hist_hi" => self.hist_hi = parse_num(value).map_err(err)?,
            "bins" => self.bins = parse_num(value).map_err(err)?,
            "grid" => self.grid = parse_num(value).map_err(err)?,
            "c" => self.c = parse_list(value).map_err(err)?,
            "states" => self.states = parse_num(value).map_err(err)?,
            "gamma" => self.gamma = parse_num(value).map_err(err)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every field as text, in [`KEYS`] order. Feeding these back through
    /// [`apply`](Self::apply) reproduces the config exactly.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let schemes = self.schemes.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
        let values = [
            self.experiment.name().to_string(),
            self.loss.name().to_string(),
            self.epsilon.to_string(),
            schemes,
            list(&self.a),
            list(&self.f),
            list(&self.eta),
            list(&self.theta0),
            self.steps.to_string(),
            self.replicas.to_string(),
            self.seed.to_string(),
            self.burn_in.to_string(),
            self.radius.to_string(),
            self.hist_lo.to_string(),
            self.hist_hi.to_string(),
            self.bins.to_string(),
            self.grid.to_string(),
            list(&self.c),
            self.states.to_string(),
            self.gamma.to_string(),
            self.out.display().to_string(),
        ];
        KEYS.iter().zip(values).map(|((k, _), v)| (k.to_string(), v)).collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Defaults for `experiment`, then the config file, then `--set`
    /// overrides. Every problem found along the way is reported together.
    pub fn resolve(experiment: Experiment, file: Option<&str>, overrides: &[(String, String)]) -> Result<Self, Vec<String>> {
        let mut cfg = Self::defaults(experiment);
        let mut problems = Vec::new();
        let mut pairs = Vec::new();
        if let Some(text) = file {
            let (p, e) = parse_text(text);
            pairs.extend(p);
            problems.extend(e);
        }
        pairs.extend(overrides.iter().cloned());
        for (k, v) in &pairs {
            if let Err(e) = cfg.apply(k, v) {
                problems.push(e);
            }
        }
        if problems.is_empty() {
            if let Err(e) = cfg.validate() {
                problems.extend(e);
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(problems)
        }
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut p = Vec::new();
        let e = self.experiment;
        let uses_proportions = e != Experiment::Fig4;
        if uses_proportions {
            for (name, v) in [("a", &self.a), ("f", &self.f)] {
                if let Err(err) = Proportions::new(v.clone()) {
                    p.push(format!("{name}: {err}"));
                } else if v.len() != 2 {
                    p.push(format!("{name}: the built-in losses have two groups, got {} entries", v.len()));
                }
            }
        }
        if self.schemes.is_empty() {
            p.push("schemes: must name at least one scheme".into());
        }
        if self.eta.is_empty() {
            p.push("eta: must not be empty".into());
        }
        if self.eta.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            p.push("eta: every learning rate must be finite and > 0".into());
        }
        if self.eta.windows(2).any(|w| w[1] <= w[0]) {
            p.push("eta: sweep list must be strictly ascending".into());
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            p.push(format!("epsilon: {} must be finite and >= 0", self.epsilon));
        }
        if e != Experiment::Fig4 && e != Experiment::StabilityTable && e != Experiment::GibbsTable {
            if self.theta0.is_empty() {
                p.push("theta0: must not be empty".into());
            }
            if self.theta0.iter().any(|x| !x.is_finite()) {
                p.push("theta0: values must be finite".into());
            }
        }
        if self.steps == 0 {
            p.push("steps: must be >= 1".into());
        }
        if self.replicas == 0 {
            p.push("replicas: must be >= 1".into());
        }
        if e == Experiment::VarianceCheck && self.replicas < 2 {
            p.push("replicas: variance-check needs at least 2 draws".into());
        }
        if e.is_sgd() {
            if !(0.0..1.0).contains(&self.burn_in) {
                p.push(format!("burn_in: {} must lie in [0, 1)", self.burn_in));
            }
            if !(self.radius.is_finite() && self.radius > 0.0) {
                p.push(format!("radius: {} must be > 0", self.radius));
            }
            if !(self.hist_lo.is_finite() && self.hist_hi.is_finite() && self.hist_lo < self.hist_hi) {
                p.push(format!("hist_lo, hist_hi: need finite lo < hi, got [{}, {}]", self.hist_lo, self.hist_hi));
            }
            if self.bins == 0 {
                p.push("bins: must be >= 1".into());
            }
        }
        match e {
            Experiment::StabilityTable if self.loss != LossKind::Quadratic => {
                p.push("loss: stability-table is defined for the quadratic example".into())
            }
            Experiment::GibbsTable if self.loss != LossKind::Linear => {
                p.push("loss: gibbs-table is defined for the linear example".into())
            }
            _ => {}
        }
        if e == Experiment::GibbsTable && self.grid < 100 {
            p.push(format!("grid: {} is too small (need >= 100)", self.grid));
        }
        if e == Experiment::Fig4 {
            if self.c.is_empty() {
                p.push("c: must not be empty".into());
            }
            if self.c.iter().any(|c| !(0.0..0.5).contains(c)) {
                p.push("c: every bias must lie in [0, 0.5)".into());
            }
            if self.states < 3 {
                p.push(format!("states: ring needs at least 3 states, got {}", self.states));
            }
            if !(0.0..1.0).contains(&self.gamma) {
                p.push(format!("gamma: {} must lie in [0, 1)", self.gamma));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(p)
        }
    }
}

fn split(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_num<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn parse_list(value: &str) -> Result<Vec<f64>, String> {
    split(value).map(parse_num).collect()
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
/// Returns the well-formed pairs and a problem per malformed line.
pub fn parse_text(text: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match parse_assignment(line) {
            Some(kv) => pairs.push(kv),
            None => problems.push(format!("line {}: expected `key = value`, got `{line}`", i + 1)),
        }
    }
    (pairs, problems)
}

pub fn parse_assignment(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_lossless() {
        for e in Experiment::ALL {
            let mut cfg = ExperimentConfig::defaults(e);
            cfg.eta = vec![0.1 + 0.2, 1.0 / 3.0];
            cfg.seed = u64::MAX;
            let back = ExperimentConfig::resolve(e, Some(&cfg.to_text()), &[]);
            // ascending eta keeps validation happy
            assert_eq!(back.unwrap(), cfg);
        }
    }

    #[test]
    fn all_problems_reported_together() {
        let set = |k: &str, v: &str| (k.to_string(), v.to_string());
        let errs = ExperimentConfig::resolve(
            Experiment::Fig1,
            None,
            &[set("a", "0.5,0.6"), set("f", "1,0"), set("eta", "0.5,0.3"), set("steps", "0")],
        )
        .unwrap_err();
        assert!(errs.iter().any(|e| e.starts_with("a:")), "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("f:")), "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("eta:")), "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("steps:")), "{errs:?}");
    }

    #[test]
    fn parse_errors_accumulate() {
        let errs = ExperimentConfig::resolve(Experiment::Fig2, Some("eta = x\nnonsense\nbogus = 1\n"), &[]).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
        let errs = ExperimentConfig::resolve(Experiment::Fig2, Some("eta = x\nbogus = 1\n"), &[]).unwrap_err();
        assert_eq!(errs.len(), 2, "{errs:?}");
    }

    #[test]
    fn experiment_key_must_match() {
        let errs = ExperimentConfig::resolve(Experiment::Fig1, Some("experiment = fig2"), &[]).unwrap_err();
        assert!(errs[0].starts_with("experiment:"));
        assert!(ExperimentConfig::resolve(Experiment::Fig1, Some("experiment = fig1"), &[]).is_ok());
    }

    #[test]
    fn defaults_validate() {
        for e in Experiment::ALL {
            ExperimentConfig::defaults(e).validate().unwrap();
        }
    }

    #[test]
    fn keys_cover_every_field() {
        let cfg = ExperimentConfig::defaults(Experiment::Fig1);
        let mut copy = ExperimentConfig::defaults(Experiment::Fig1);
        for (k, v) in cfg.to_pairs() {
            copy.apply(&k, &v).unwrap();
        }
        assert_eq!(copy, cfg);
        assert_eq!(cfg.to_pairs().len(), KEYS.len());
    }
}

//! Named experiments. Each turns a resolved config into named series.

use std::path::Path;

use rayon::prelude::*;

use biaslab::offpolicy::{exact_value, run_offpolicy, OffPolicyConfig, Policy, RingMdp};
use biaslab::sampler::variance_grad;
use biaslab::sgd::{self, basin_fraction, run_ensemble, SgdConfig};
use biaslab::stability::{stability_report, MinimizerSide};
use biaslab::stationary::{
    flux_residual, gibbs_ratio_linear, gibbs_ratio_multid, stationary_density, DensityOptions,
};
use biaslab::{Error, GradientSampler, GroupedLoss1D, GroupedLossMultiD, HistogramSpec, Proportions, RngStream};

use crate::config::{Experiment, ExperimentConfig, LossKind};
use crate::error::CliError;
use crate::output::{eta_dir, num, ResultRecord, RunOutput, Series};

/// Minimizers of both built-in one-dimensional losses.
const MINIMIZERS: [f64; 2] = [-1.0, 1.0];

/// What one invocation produces: a single record, or one per learning rate
/// plus a summary across them.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Single(RunOutput),
    Sweep { entries: Vec<RunOutput>, summary: RunOutput },
}

impl Plan {
    /// Writes the plan under `cfg.out`; sweep entries go to `eta_<value>`
    /// subdirectories.
    pub fn write(&self, root: &Path) -> Result<Vec<ResultRecord>, CliError> {
        match self {
            Plan::Single(run) => Ok(vec![run.write(root)?]),
            Plan::Sweep { entries, summary } => {
                let mut records = Vec::with_capacity(entries.len() + 1);
                for e in entries {
                    records.push(e.write(&e.config.out)?);
                }
                records.push(summary.write(root)?);
                Ok(records)
            }
        }
    }
}

pub fn execute(cfg: &ExperimentConfig) -> Result<Plan, CliError> {
    cfg.validate().map_err(CliError::Config)?;
    if cfg.experiment.is_sgd() && cfg.eta.len() > 1 {
        return sweep(cfg);
    }
    let series = match cfg.experiment {
        Experiment::Fig1 | Experiment::Fig2 | Experiment::SweepQuadratic | Experiment::SweepLinear => sgd_basins(cfg)?,
        Experiment::Fig4 => fig4(cfg)?,
        Experiment::StabilityTable => stability_table(cfg)?,
        Experiment::GibbsTable => gibbs_table(cfg)?,
        Experiment::VarianceCheck => variance_check(cfg)?,
    };
    Ok(Plan::Single(RunOutput { config: cfg.clone(), series }))
}

fn sweep(cfg: &ExperimentConfig) -> Result<Plan, CliError> {
    let entries: Vec<RunOutput> = cfg
        .eta
        .par_iter()
        .map(|&eta| {
            let sub = ExperimentConfig { eta: vec![eta], out: eta_dir(&cfg.out, eta), ..cfg.clone() };
            Ok(RunOutput { series: sgd_basins(&sub)?, config: sub })
        })
        .collect::<Result<_, CliError>>()?;
    let mut summary = Series::new("basins_by_eta", "basin fractions for every learning rate", &BASIN_COLUMNS_BY_ETA);
    for e in &entries {
        let basins = e.series.iter().find(|s| s.name == "basins").expect("sgd runs emit basins");
        for row in &basins.rows {
            let mut r = vec![num(e.config.eta[0])];
            r.extend(row.iter().cloned());
            summary.push(r);
        }
    }
    Ok(Plan::Sweep { entries, summary: RunOutput { config: cfg.clone(), series: vec![summary] } })
}

fn proportions(cfg: &ExperimentConfig) -> Result<(Proportions, Proportions), CliError> {
    Ok((Proportions::new(cfg.a.clone())?, Proportions::new(cfg.f.clone())?))
}

fn loss(cfg: &ExperimentConfig) -> Result<GroupedLoss1D, CliError> {
    Ok(match cfg.loss {
        LossKind::Quadratic => GroupedLoss1D::quadratic_example(),
        LossKind::Linear => GroupedLoss1D::linear_example(cfg.epsilon)?,
    })
}

const BASIN_COLUMNS: [(&str, &str); 6] = [
    ("scheme", "gradient estimator"),
    ("theta0", "initial iterate"),
    ("near_minus", "fraction of replicas ending within radius of -1"),
    ("near_plus", "fraction of replicas ending within radius of +1"),
    ("unclassified", "fraction of finite replicas ending near neither"),
    ("diverged", "fraction of replicas that diverged"),
];

const BASIN_COLUMNS_BY_ETA: [(&str, &str); 7] = [
    ("eta", "learning rate"),
    BASIN_COLUMNS[0],
    BASIN_COLUMNS[1],
    BASIN_COLUMNS[2],
    BASIN_COLUMNS[3],
    BASIN_COLUMNS[4],
    BASIN_COLUMNS[5],
];

/// Ensembles for every scheme and start: basin fractions, the replica-0
/// trajectory and the pooled post-burn-in histogram.
fn sgd_basins(cfg: &ExperimentConfig) -> Result<Vec<Series>, CliError> {
    let (a, f) = proportions(cfg)?;
    let loss = loss(cfg)?;
    let eta = cfg.eta[0];
    let spec = HistogramSpec::new(cfg.hist_lo, cfg.hist_hi, cfg.bins)?;
    let mut basins = Series::new("basins", "terminal basin fractions over replicas", &BASIN_COLUMNS);
    let mut series = Vec::new();
    for &scheme in &cfg.schemes {
        for &theta0 in &cfg.theta0 {
            let sgd_cfg = SgdConfig::new(eta, cfg.steps, theta0)
                .replicas(cfg.replicas)
                .seed(cfg.seed)
                .burn_in(cfg.burn_in)
                .histogram(spec);
            let stats = run_ensemble(&loss, scheme, &a, &f, &sgd_cfg, MINIMIZERS[1])?;
            let b = basin_fraction(&stats, &MINIMIZERS, cfg.radius)?;
            basins.push(vec![
                scheme.name().into(),
                num(theta0),
                num(b.fractions[0]),
                num(b.fractions[1]),
                num(b.unclassified),
                num(b.diverged),
            ]);

            let tag = format!("{}_theta0_{theta0}", scheme.name());
            let mut traj = Series::new(
                format!("trajectory_{tag}"),
                "replica 0 iterates; empty if the replica diverged",
                &[("step", "iteration k"), ("theta", "iterate theta_k")],
            );
            match sgd::run(&loss, scheme, &a, &f, &sgd_cfg) {
                Ok(t) => {
                    for (k, x) in t.iterates.iter().enumerate() {
                        traj.push(vec![k.to_string(), num(*x)]);
                    }
                }
                Err(Error::NonFinite { .. }) => {}
                Err(e) => return Err(e.into()),
            }
            series.push(traj);

            let mut hist = Series::new(
                format!("histogram_{tag}"),
                "pooled post-burn-in iterates of the finite replicas",
                &[("bin_center", "theta at the bin center"), ("density", "probability density per unit theta")],
            );
            if stats.histogram.in_domain() > 0 {
                for (i, d) in stats.histogram.densities()?.into_iter().enumerate() {
                    hist.push(vec![num(spec.center(i)), num(d)]);
                }
            }
            series.push(hist);
        }
    }
    series.insert(0, basins);
    Ok(series)
}

fn fig4(cfg: &ExperimentConfig) -> Result<Vec<Series>, CliError> {
    let mdp = RingMdp::sine(cfg.states, cfg.gamma)?;
    let pi = Policy::uniform(cfg.states);
    let truth = exact_value(&mdp, &pi)?;
    let mut exact = Series::new(
        "exact_values",
        "target-policy values from the linear solve",
        &[("state", "ring state s"), ("value", "V_pi(s)")],
    );
    for (s, v) in truth.values.iter().enumerate() {
        exact.push(vec![s.to_string(), num(*v)]);
    }
    let mut summary = Series::new(
        "td_summary",
        "medians over seeds of the final error",
        &[
            ("scheme", "TD update rule"),
            ("c", "behavior bias"),
            ("median_final_error", "||V_T - V_pi||^2"),
            ("median_log_relative", "log(e_T / e_0)"),
        ],
    );
    let mut series = vec![exact];
    for &scheme in &cfg.schemes {
        for &c in &cfg.c {
            let curves = (0..cfg.replicas as u64)
                .into_par_iter()
                .map(|k| {
                    let run = OffPolicyConfig::new(scheme, c, cfg.steps, cfg.eta[0], cfg.seed.wrapping_add(k));
                    run_offpolicy(&mdp, &pi, &run)
                })
                .collect::<biaslab::Result<Vec<_>>>()?;
            let mut curve = Series::new(
                format!("error_{}_c_{c}", scheme.name()),
                "median over seeds of the squared value error",
                &[("step", "updates t"), ("median_error", "||V_t - V_pi||^2"), ("median_log_relative", "log(e_t / e_0)")],
            );
            for (i, &t) in curves[0].steps.iter().enumerate() {
                let e = median(curves.iter().map(|c| c.errors[i]).collect());
                let r = median(curves.iter().map(|c| (c.errors[i] / c.errors[0]).ln()).collect());
                curve.push(vec![t.to_string(), num(e), num(r)]);
            }
            summary.push(vec![
                scheme.name().into(),
                num(c),
                num(median(curves.iter().map(|c| c.last()).collect())),
                num(median(curves.iter().map(|c| (c.last() / c.initial()).ln()).collect())),
            ]);
            series.push(curve);
        }
    }
    series.push(summary);
    Ok(series)
}

fn stability_table(cfg: &ExperimentConfig) -> Result<Vec<Series>, CliError> {
    let (a, f) = proportions(cfg)?;
    let mut table = Series::new(
        "stability",
        "second-moment factor of the linearized recursion",
        &[
            ("scheme", "gradient estimator"),
            ("minimizer", "theta*"),
            ("eta", "learning rate"),
            ("factor", "per-step multiplier of E[(theta_k - theta*)^2]"),
            ("stable", "factor <= 1"),
            ("critical_eta", "largest stable learning rate"),
        ],
    );
    for &scheme in &cfg.schemes {
        for side in MinimizerSide::BOTH {
            for &eta in &cfg.eta {
                let r = stability_report(scheme, &a, &f, eta, side)?;
                table.push(vec![
                    scheme.name().into(),
                    num(side.location()),
                    num(eta),
                    num(r.factor),
                    r.stable.to_string(),
                    num(r.critical_eta),
                ]);
            }
        }
    }
    Ok(vec![table])
}

fn gibbs_table(cfg: &ExperimentConfig) -> Result<Vec<Series>, CliError> {
    let (a, f) = proportions(cfg)?;
    let loss = loss(cfg)?;
    let mut table = Series::new(
        "gibbs",
        "p(1)/p(-1) from the closed form and from the numerical stationary density",
        &[
            ("scheme", "gradient estimator"),
            ("eta", "learning rate"),
            ("closed_form_log_ratio", "leading-order log p(1)/p(-1)"),
            ("density_log_ratio", "log p(1)/p(-1) from the density"),
            ("flux_residual", "max stationary flux residual"),
            ("continuity", "max relative jump of Sigma p at breakpoints"),
            ("condition", "reweighting condition for p(1) > p(-1); empty for resampling"),
        ],
    );
    let mut series = Vec::new();
    for &scheme in &cfg.schemes {
        for &eta in &cfg.eta {
            let d = stationary_density(&loss, scheme, &a, &f, eta, DensityOptions { domain: None, grid_size: cfg.grid })?;
            let lemma = gibbs_ratio_linear(scheme, &a, &f, eta, cfg.epsilon)?;
            table.push(vec![
                scheme.name().into(),
                num(eta),
                num(lemma.ratio.log_ratio),
                num(d.point_ratio(1.0, -1.0)?.ln()),
                num(flux_residual(&d)),
                num(d.sigma_p_continuity()),
                lemma.condition.map(|c| c.to_string()).unwrap_or_default(),
            ]);
            let z = d.total_mass();
            let mut density = Series::new(
                format!("density_{}_eta_{eta}", scheme.name()),
                "normalized stationary density on its grid",
                &[("theta", "position"), ("density", "probability density per unit theta")],
            );
            for (x, q) in d.table() {
                density.push(vec![num(x), num(q / z)]);
            }
            series.push(density);
        }
    }
    let multid = GroupedLossMultiD::two_region_example(2, 1.0, 1.0, cfg.epsilon)?;
    let mut md = Series::new(
        "multid_ratio",
        "two-region L1 example in two dimensions, unit slope and depth",
        &[("scheme", "gradient estimator"), ("eta", "learning rate"), ("log_ratio", "log p(region 1)/p(region 0)")],
    );
    for &scheme in &cfg.schemes {
        for &eta in &cfg.eta {
            md.push(vec![scheme.name().into(), num(eta), num(gibbs_ratio_multid(&multid, scheme, &a, &f, eta, 1, 0)?.log_ratio)]);
        }
    }
    series.insert(0, table);
    series.push(md);
    Ok(series)
}

fn variance_check(cfg: &ExperimentConfig) -> Result<Vec<Series>, CliError> {
    let (a, f) = proportions(cfg)?;
    let loss = loss(cfg)?;
    let mut series = Vec::new();
    for (si, &scheme) in cfg.schemes.iter().enumerate() {
        let sampler = GradientSampler::new(scheme, &a, &f)?;
        let rows = cfg
            .theta0
            .par_iter()
            .enumerate()
            .map(|(ti, &theta)| {
                let closed = variance_grad(scheme, &loss, &a, &f, theta)?;
                let mut rng = RngStream::new(cfg.seed, (si * cfg.theta0.len() + ti) as u64);
                let (mut mean, mut m2) = (0.0, 0.0);
                for k in 1..=cfg.replicas {
                    let g = sampler.draw(&loss, theta, &mut rng)?.grad;
                    let d = g - mean;
                    mean += d / k as f64;
                    m2 += d * (g - mean);
                }
                let mc = m2 / (cfg.replicas - 1) as f64;
                let rel = if closed == 0.0 { mc.abs() } else { (mc / closed - 1.0).abs() };
                Ok(vec![num(theta), num(closed), num(mc), num(rel)])
            })
            .collect::<biaslab::Result<Vec<_>>>()?;
        let mut s = Series::new(
            format!("variance_{}", scheme.name()),
            "gradient variance of a single draw",
            &[
                ("theta", "evaluation point"),
                ("closed_form", "exact variance"),
                ("monte_carlo", "sample variance over the draws"),
                ("rel_error", "|monte_carlo / closed_form - 1| (absolute if the closed form is 0)"),
            ],
        );
        rows.into_iter().for_each(|r| s.push(r));
        series.push(s);
    }
    Ok(series)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(e: Experiment) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(e);
        cfg.replicas = cfg.replicas.min(20);
        cfg.steps = cfg.steps.min(300);
        cfg
    }

    #[test]
    fn every_experiment_runs_small() {
        for e in Experiment::ALL {
            let mut cfg = small(e);
            if e == Experiment::VarianceCheck {
                cfg.replicas = 1000;
            }
            let plan = execute(&cfg).unwrap();
            let series = match &plan {
                Plan::Single(r) => r.series.clone(),
                Plan::Sweep { entries, summary } => {
                    assert_eq!(entries.len(), cfg.eta.len());
                    summary.series.clone()
                }
            };
            assert!(!series.is_empty(), "{e}");
            for s in series {
                for row in &s.rows {
                    assert_eq!(row.len(), s.columns.len(), "{e} {}", s.name);
                }
            }
        }
    }

    #[test]
    fn single_element_sweep_matches_fig1() {
        let fig1 = small(Experiment::Fig1);
        let sweep = ExperimentConfig { experiment: Experiment::SweepQuadratic, eta: vec![0.5], ..fig1.clone() };
        let (Plan::Single(a), Plan::Single(b)) = (execute(&fig1).unwrap(), execute(&sweep).unwrap()) else {
            panic!("single learning rate is not a sweep");
        };
        assert_eq!(a.series, b.series);
    }

    #[test]
    fn sweep_summary_has_row_per_eta_scheme_start() {
        let cfg = small(Experiment::SweepQuadratic);
        let Plan::Sweep { summary, .. } = execute(&cfg).unwrap() else { panic!("expected sweep") };
        assert_eq!(summary.series[0].rows.len(), cfg.eta.len() * cfg.schemes.len() * cfg.theta0.len());
    }

    #[test]
    fn stability_table_values() {
        let cfg = ExperimentConfig { eta: vec![0.5], ..ExperimentConfig::defaults(Experiment::StabilityTable) };
        let Plan::Single(r) = execute(&cfg).unwrap() else { panic!() };
        let rows = &r.series[0].rows;
        let find = |scheme: &str| rows.iter().find(|r| r[0] == scheme && r[1] == "1.0").unwrap();
        assert!((find("resampling")[3].parse::<f64>().unwrap() - 0.55).abs() < 1e-12);
        assert!((find("reweighting")[3].parse::<f64>().unwrap() - 1.3).abs() < 1e-12);
        assert_eq!(find("reweighting")[4], "false");
    }
}

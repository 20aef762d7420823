//! Worked examples for the public operations, checked end to end.

use biaslab::sgd::{basin_fraction, run_ensemble, SgdConfig};
use biaslab::stability::{moment_curve, verify_factor, MinimizerSide};
use biaslab::stationary::{gibbs_ratio_linear, gibbs_ratio_multid};
use biaslab::{GroupedLoss1D, GroupedLossMultiD, Proportions, Scheme};

fn props(x: f64, y: f64) -> Proportions {
    Proportions::two(x, y).unwrap()
}

fn fig1() -> (Proportions, Proportions) {
    (props(0.4, 0.6), props(0.9, 0.1))
}

fn fraction_near(scheme: Scheme, loss: &GroupedLoss1D, cfg: &SgdConfig, center: f64, radius: f64) -> f64 {
    let (a, f) = fig1();
    let stats = run_ensemble(loss, scheme, &a, &f, cfg, center).unwrap();
    let b = basin_fraction(&stats, &[center], radius).unwrap();
    b.fractions[0]
}

#[test]
fn figure_one_trajectories() {
    let loss = GroupedLoss1D::quadratic_example();
    let resampling = SgdConfig::new(0.5, 100, 2.0).replicas(200).seed(21);
    assert!(fraction_near(Scheme::Resampling, &loss, &resampling, 1.0, 0.5) >= 0.9);
    let reweighting = SgdConfig::new(0.5, 200, 1.1).replicas(200).seed(21);
    assert!(fraction_near(Scheme::Reweighting, &loss, &reweighting, -1.0, 0.5) >= 0.9);
}

#[test]
fn figure_two_resampling_settles_at_global_minimizer() {
    let loss = GroupedLoss1D::linear_example(0.1).unwrap();
    let cfg = SgdConfig::new(0.12, 10_000, 0.9).replicas(200).seed(22);
    assert!(fraction_near(Scheme::Resampling, &loss, &cfg, 1.0, 0.5) >= 0.9);
}

#[test]
fn moment_curve_power() {
    let a = props(0.4, 0.6);
    let curve = moment_curve(Scheme::Resampling, &a, &a, 0.5, MinimizerSide::Plus, 2.0, 10).unwrap();
    assert_eq!(curve[0], 1.0);
    assert!((curve[10] - 0.55f64.powi(10)).abs() < 1e-15);
    assert!((curve[10] - 2.533e-3).abs() < 1e-6);
}

#[test]
fn zero_rate_verification_is_exact() {
    let (a, f) = fig1();
    for scheme in Scheme::ALL {
        assert_eq!(verify_factor(scheme, &a, &f, 0.0, MinimizerSide::Plus, 10_000, 20, 1).unwrap(), 0.0);
    }
}

#[test]
fn linear_ratio_examples() {
    let (a, f) = fig1();
    let s = gibbs_ratio_linear(Scheme::Resampling, &a, &f, 0.12, 0.0).unwrap().ratio;
    assert!((s.log_ratio - 0.4 / (0.24 * 0.12)).abs() < 1e-12);
    assert!((s.ratio / 1.08e6 - 1.0).abs() < 0.01);
    let w = gibbs_ratio_linear(Scheme::Reweighting, &a, &f, 0.12, 0.0).unwrap().ratio;
    let prefactor: f64 = (0.16 / 0.81) / (0.36 / 0.01);
    assert!((prefactor - 0.00549).abs() < 1e-5);
    assert!((w.log_ratio - (prefactor.ln() - 371.9)).abs() < 0.1);
    assert!(w.ratio < 1.0);
    let h = props(0.5, 0.5);
    for scheme in Scheme::ALL {
        assert!((gibbs_ratio_linear(scheme, &h, &h, 0.3, 0.0).unwrap().ratio.ratio - 1.0).abs() < 1e-12);
    }
}

#[test]
fn multid_ratio_examples() {
    let (a, f) = fig1();
    let loss = GroupedLossMultiD::two_region_example(2, 1.0, 1.0, 0.1).unwrap();
    let s = gibbs_ratio_multid(&loss, Scheme::Resampling, &a, &f, 0.5, 1, 0).unwrap();
    assert!((s.ratio - 28.03).abs() < 0.01);
    // f beta / (a (1 - f) kappa^2) per region
    let w = gibbs_ratio_multid(&loss, Scheme::Reweighting, &a, &f, 0.5, 1, 0).unwrap();
    let expected = 4.0 * (0.1 / (0.6 * 0.9) - 0.9 / (0.4 * 0.1));
    assert!((w.log_ratio - expected).abs() < 1e-12);
    let h = props(0.5, 0.5);
    assert_eq!(gibbs_ratio_multid(&loss, Scheme::Resampling, &h, &f, 0.5, 1, 0).unwrap().ratio, 1.0);
    // f = a with a_p > a_q favours p under reweighting
    let w = gibbs_ratio_multid(&loss, Scheme::Reweighting, &a, &a, 0.5, 1, 0).unwrap();
    assert!(w.ratio > 1.0);
}

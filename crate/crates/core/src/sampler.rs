//! Stochastic gradient draws under the two bias-correction schemes.
//!
//! Resampling draws the group from the population proportions `a` and uses
//! the plain gradient. Reweighting draws the group from the sampling
//! proportions `f` and multiplies the gradient by `a_g / f_g`. Both have the
//! same mean; their variances differ:
//!
//! ```text
//! Var_resampling  = sum_i a_i     g_i g_i^T - m m^T
//! Var_reweighting = sum_i a_i^2/f_i g_i g_i^T - m m^T,   m = sum_i a_i g_i
//! ```

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{GroupedLoss1D, GroupedLossMultiD, Proportions};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Resampling,
    Reweighting,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::Resampling, Scheme::Reweighting];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Resampling => "resampling",
            Scheme::Reweighting => "reweighting",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "resampling" | "rs" => Ok(Scheme::Resampling),
            "reweighting" | "rw" => Ok(Scheme::Reweighting),
            other => Err(Error::InvalidConfig(format!("unknown scheme '{other}'"))),
        }
    }
}

/// One stochastic gradient realization. `grad` already includes `weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDraw<G = f64> {
    pub group: usize,
    pub weight: f64,
    pub grad: G,
}

/// Group-selection rule of a scheme, precomputed from `(a, f)`.
#[derive(Debug, Clone)]
pub struct GradientSampler {
    scheme: Scheme,
    probs: Vec<f64>,
    weights: Vec<f64>,
}

impl GradientSampler {
    pub fn new(scheme: Scheme, a: &Proportions, f: &Proportions) -> Result<Self> {
        if a.len() != f.len() {
            return Err(Error::DimensionMismatch { expected: a.len(), got: f.len() });
        }
        let (probs, weights) = match scheme {
            Scheme::Resampling => (a.to_vec(), vec![1.0; a.len()]),
            Scheme::Reweighting => (f.to_vec(), a.iter().zip(f.iter()).map(|(ai, fi)| ai / fi).collect()),
        };
        Ok(Self { scheme, probs, weights })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Probability of drawing each group.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Importance weight applied to each group's gradient.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn groups(&self) -> usize {
        self.probs.len()
    }

    /// Draws a group and returns it with its weight.
    pub fn draw_group(&self, rng: &mut RngStream) -> (usize, f64) {
        let g = rng.categorical(&self.probs);
        (g, self.weights[g])
    }

    pub fn draw(&self, loss: &GroupedLoss1D, theta: f64, rng: &mut RngStream) -> Result<GradientDraw> {
        if loss.groups() != self.groups() {
            return Err(Error::DimensionMismatch { expected: loss.groups(), got: self.groups() });
        }
        let (group, weight) = self.draw_group(rng);
        Ok(GradientDraw { group, weight, grad: weight * loss.group_grad(group, theta)? })
    }

    pub fn draw_multid(
        &self,
        loss: &GroupedLossMultiD,
        theta: &[f64],
        rng: &mut RngStream,
    ) -> Result<GradientDraw<Vec<f64>>> {
        if loss.groups() != self.groups() {
            return Err(Error::DimensionMismatch { expected: loss.groups(), got: self.groups() });
        }
        let (group, weight) = self.draw_group(rng);
        let mut grad = loss.group_grad(group, theta)?;
        grad.iter_mut().for_each(|g| *g *= weight);
        Ok(GradientDraw { group, weight, grad })
    }
}

pub fn draw(
    scheme: Scheme,
    loss: &GroupedLoss1D,
    a: &Proportions,
    f: &Proportions,
    theta: f64,
    rng: &mut RngStream,
) -> Result<GradientDraw> {
    GradientSampler::new(scheme, a, f)?.draw(loss, theta, rng)
}

fn check_groups(expected: usize, a: &[f64], f: &[f64]) -> Result<()> {
    for got in [a.len(), f.len()] {
        if got != expected {
            return Err(Error::DimensionMismatch { expected, got });
        }
    }
    Ok(())
}

/// Mean and variance of the scheme's draw given per-group gradients.
pub fn moments(scheme: Scheme, a: &[f64], f: &[f64], grads: &[f64]) -> (f64, f64) {
    let mean: f64 = a.iter().zip(grads).map(|(ai, g)| ai * g).sum();
    let second: f64 = match scheme {
        Scheme::Resampling => a.iter().zip(grads).map(|(ai, g)| ai * g * g).sum(),
        Scheme::Reweighting => a
            .iter()
            .zip(f)
            .zip(grads)
            .map(|((ai, fi), g)| ai * ai / fi * g * g)
            .sum(),
    };
    (mean, second - mean * mean)
}

/// Expected stochastic gradient, `sum_i a_i V_i'(theta)`; the same for both
/// schemes.
pub fn mean_grad(loss: &GroupedLoss1D, a: &[f64], theta: f64) -> Result<f64> {
    loss.population_grad(a, theta)
}

pub fn variance_grad(
    scheme: Scheme,
    loss: &GroupedLoss1D,
    a: &[f64],
    f: &[f64],
    theta: f64,
) -> Result<f64> {
    check_groups(loss.groups(), a, f)?;
    Ok(moments(scheme, a, f, &loss.grads(theta)).1)
}

pub fn mean_grad_multid(loss: &GroupedLossMultiD, a: &[f64], theta: &[f64]) -> Result<DVector<f64>> {
    check_groups(loss.groups(), a, a)?;
    let mut mean = DVector::zeros(loss.dim());
    for (g, ai) in a.iter().enumerate() {
        mean += DVector::from_vec(loss.group_grad(g, theta)?) * *ai;
    }
    Ok(mean)
}

pub fn variance_grad_multid(
    scheme: Scheme,
    loss: &GroupedLossMultiD,
    a: &[f64],
    f: &[f64],
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    check_groups(loss.groups(), a, f)?;
    let d = loss.dim();
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for g in 0..loss.groups() {
        let v = DVector::from_vec(loss.group_grad(g, theta)?);
        let coeff = match scheme {
            Scheme::Resampling => a[g],
            Scheme::Reweighting => a[g] * a[g] / f[g],
        };
        second += &v * v.transpose() * coeff;
        mean += v * a[g];
    }
    Ok(second - &mean * mean.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SAMPLER_STREAM_BASE;

    fn fig1() -> (Proportions, Proportions) {
        (Proportions::two(0.4, 0.6).unwrap(), Proportions::two(0.9, 0.1).unwrap())
    }

    #[test]
    fn weights_per_scheme() {
        let (a, f) = fig1();
        let rs = GradientSampler::new(Scheme::Resampling, &a, &f).unwrap();
        assert_eq!(rs.weights(), &[1.0, 1.0]);
        assert_eq!(rs.probs(), &[0.4, 0.6]);
        let rw = GradientSampler::new(Scheme::Reweighting, &a, &f).unwrap();
        assert!((rw.weights()[1] - 6.0).abs() < 1e-12);
        assert_eq!(rw.probs(), &[0.9, 0.1]);
    }

    #[test]
    fn draw_support_at_half() {
        let (a, f) = fig1();
        let loss = GroupedLoss1D::quadratic_example();
        let mut rng = RngStream::new(3, SAMPLER_STREAM_BASE);
        for _ in 0..200 {
            let d = draw(Scheme::Resampling, &loss, &a, &f, 0.5, &mut rng).unwrap();
            assert!(d.grad == 0.0 || d.grad == -0.5);
            let d = draw(Scheme::Reweighting, &loss, &a, &f, 0.5, &mut rng).unwrap();
            assert!(d.grad == 0.0 || (d.grad + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_moments() {
        let (a, f) = fig1();
        let loss = GroupedLoss1D::quadratic_example();
        assert!((mean_grad(&loss, &a, 0.5).unwrap() + 0.3).abs() < 1e-15);
        assert_eq!(mean_grad(&loss, &a, 1.0).unwrap(), 0.0);
        let lin = GroupedLoss1D::linear_example(0.0).unwrap();
        assert!((mean_grad(&lin, &a, -2.0).unwrap() + 0.4).abs() < 1e-15);
        let vs = variance_grad(Scheme::Resampling, &loss, &a, &f, 0.5).unwrap();
        let vw = variance_grad(Scheme::Reweighting, &loss, &a, &f, 0.5).unwrap();
        assert!((vs - 0.06).abs() < 1e-12, "{vs}");
        assert!((vw - 0.81).abs() < 1e-12, "{vw}");
    }

    #[test]
    fn schemes_coincide_when_f_equals_a() {
        let a = Proportions::two(0.3, 0.7).unwrap();
        let loss = GroupedLoss1D::linear_example(0.1).unwrap();
        for t in [-2.0, -0.5, 0.3, 1.7] {
            let s = variance_grad(Scheme::Resampling, &loss, &a, &a, t).unwrap();
            let w = variance_grad(Scheme::Reweighting, &loss, &a, &a, t).unwrap();
            assert!((s - w).abs() < 1e-15);
        }
        let rs = GradientSampler::new(Scheme::Resampling, &a, &a).unwrap();
        let rw = GradientSampler::new(Scheme::Reweighting, &a, &a).unwrap();
        let mut r1 = RngStream::new(9, 0);
        let mut r2 = RngStream::new(9, 0);
        for _ in 0..100 {
            assert_eq!(rs.draw(&loss, 0.4, &mut r1).unwrap(), rw.draw(&loss, 0.4, &mut r2).unwrap());
        }
    }

    #[test]
    fn reweighting_dominates_on_undersampled_piece() {
        let (a, f) = fig1();
        let loss = GroupedLoss1D::quadratic_example();
        for i in 1..100 {
            let t = i as f64 * 0.03;
            let s = variance_grad(Scheme::Resampling, &loss, &a, &f, t).unwrap();
            let w = variance_grad(Scheme::Reweighting, &loss, &a, &f, t).unwrap();
            assert!(w >= s);
        }
    }

    #[test]
    fn mismatched_groups() {
        let a = Proportions::two(0.4, 0.6).unwrap();
        let f = Proportions::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(GradientSampler::new(Scheme::Reweighting, &a, &f).is_err());
    }

    #[test]
    fn multid_variance_matches_definition() {
        let loss = GroupedLossMultiD::two_region_example(2, 1.0, 1.0, 0.1).unwrap();
        let (a, f) = fig1();
        let theta = [-0.5, 0.3];
        let v = variance_grad_multid(Scheme::Reweighting, &loss, &a, &f, &theta).unwrap();
        // coordinate 0: group grads (w1*1, w2*(-0.1)) with w = a/f
        let g0 = [0.4 / 0.9, -0.6 / 0.1 * 0.1];
        let m: f64 = 0.9 * g0[0] + 0.1 * g0[1];
        let expect = 0.9 * g0[0] * g0[0] + 0.1 * g0[1] * g0[1] - m * m;
        assert!((v[(0, 0)] - expect).abs() < 1e-12);
        assert!((v[(0, 1)] - v[(1, 0)]).abs() < 1e-15);
    }
}

//! Numerical laboratory for stochastic gradient descent on biased data.
//!
//! Two ways of correcting a sampling bias give the same expected objective:
//! reweighting each sample by `a_i / f_i`, or resampling groups at their
//! population proportions `a_i`. Under SGD they behave very differently. This
//! crate provides the pieces needed to see why, each paired with an
//! independent check:
//!
//! - [`loss`]: the grouped toy losses (quadratic, piecewise linear, general
//!   convex, multi-dimensional L1) with exact values and gradients.
//! - [`sampler`]: stochastic gradient draws for both schemes plus exact
//!   first/second moment oracles.
//! - [`sgd`]: single trajectories and replica ensembles.
//! - [`stability`]: closed-form second-moment factors and critical learning
//!   rates around the minimizers of the quadratic example.
//! - [`stationary`]: piecewise Gibbs densities of the approximating SDE and the
//!   closed-form minimizer ratios.
//! - [`sde`]: Euler–Maruyama integration of the approximating SDE and weak
//!   comparison against SGD.
//! - [`offpolicy`]: tabular off-policy TD prediction on a ring MDP.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod histogram;
pub mod loss;
pub mod offpolicy;
pub mod quad;
pub mod rng;
pub mod sampler;
pub mod sde;
pub mod sgd;
pub mod stability;
pub mod stationary;

/// Library version recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use histogram::{Histogram, HistogramSpec};
pub use loss::{
    BoxRegion, ConvexPiece, GroupedLoss1D, GroupedLossMultiD, L1Region, LossFamily, Minimizer,
    MinimizerMultiD, Piece, Proportions,
};
pub use rng::RngStream;
pub use sampler::{GradientDraw, GradientSampler, Scheme};

//! Gaussian variational approximation with a factor covariance structure.
//!
//! The approximating family is `N(mu, B B' + D^2)` with `B` an `m x p`
//! loading matrix (upper triangle fixed at zero) and `D` diagonal. The lower
//! bound is maximized by stochastic gradient ascent with reparametrized
//! single-draw gradients and per-element ADADELTA step sizes.
//!
//! - [`factor_gaussian`]: sampling, Woodbury solves, log-determinants, densities, KL.
//! - [`gradients`]: single-draw gradient estimators and the Monte Carlo lower bound.
//! - [`models`]: the [`Model`] trait and the bundled targets.
//! - [`optimizer`]: ADADELTA and the fitting loop.
//! - [`baseline_full`]: full-Cholesky comparator.
//! - [`harness`]: data loading, cross-validation and experiment output.

pub mod baseline_full;
pub mod error;
pub mod factor_gaussian;
pub mod gradients;
pub mod harness;
pub mod models;
pub mod optimizer;

pub use error::{Error, Result};
pub use factor_gaussian::{kl_gaussians, BaseNoise, FactorGaussian, D_FLOOR};
pub use models::Model;
pub use optimizer::{fit, FitConfig, FitResult};

//! Dense reference computations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use factorvi::{FactorGaussian, Model};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_factor<R: Rng>(rng: &mut R, m: usize, p: usize) -> FactorGaussian {
    let mu = DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
    let mut b = DMatrix::from_fn(m, p, |_, _| rng.sample(StandardNormal));
    for k in 0..p {
        for i in 0..k {
            b[(i, k)] = 0.0;
        }
    }
    let d = DVector::from_fn(m, |_, _| {
        let v: f64 = rng.random_range(0.3..1.5);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    });
    FactorGaussian::new(mu, b, d).unwrap()
}

pub fn dense_log_det(s: &DMatrix<f64>) -> f64 {
    let l = s.clone().cholesky().expect("spd").unpack();
    2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

pub fn dense_inverse(s: &DMatrix<f64>) -> DMatrix<f64> {
    s.clone().cholesky().expect("spd").inverse()
}

/// `KL(N(m1, s1) || N(m2, s2))` by dense linear algebra.
pub fn dense_kl(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let k = m1.len() as f64;
    let inv2 = dense_inverse(s2);
    let diff = m2 - m1;
    0.5 * ((&inv2 * s1).trace() + diff.dot(&(&inv2 * &diff)) - k + dense_log_det(s2) - dense_log_det(s1))
}

pub fn dense_log_density(mean: &DVector<f64>, s: &DMatrix<f64>, theta: &DVector<f64>) -> f64 {
    let diff = theta - mean;
    let k = mean.len() as f64;
    -0.5 * (k * (2.0 * PI).ln() + dense_log_det(s) + diff.dot(&(dense_inverse(s) * &diff)))
}

/// Exact lower bound for a normalized Gaussian target `N(m0, s0)`:
/// `-1/2 log|2 pi S0| - 1/2 [(mu - m0)' S0^-1 (mu - m0) + tr(S0^-1 Sigma)] + 1/2 log|2 pi e Sigma|`.
pub fn gaussian_elbo(mu: &DVector<f64>, sigma: &DMatrix<f64>, m0: &DVector<f64>, s0: &DMatrix<f64>) -> f64 {
    let k = mu.len() as f64;
    let inv = dense_inverse(s0);
    let diff = mu - m0;
    let two_pi = 2.0 * PI;
    -0.5 * (k * two_pi.ln() + dense_log_det(s0)) - 0.5 * (diff.dot(&(&inv * &diff)) + (&inv * sigma).trace())
        + 0.5 * (k * (two_pi.ln() + 1.0) + dense_log_det(sigma))
}

/// Parameters flattened as `(mu, B column-major, d)`; all of `B` is included.
pub fn flatten(q: &FactorGaussian) -> Vec<f64> {
    q.mu().iter().chain(q.b().iter()).chain(q.d().iter()).copied().collect()
}

pub fn unflatten(v: &[f64], m: usize, p: usize) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let mu = DVector::from_column_slice(&v[..m]);
    let b = DMatrix::from_column_slice(m, p, &v[m..m + m * p]);
    let d = DVector::from_column_slice(&v[m + m * p..]);
    (mu, b, d)
}

/// Central finite differences of the exact lower bound, laid out like [`flatten`].
pub fn gaussian_elbo_gradient(q: &FactorGaussian, m0: &DVector<f64>, s0: &DMatrix<f64>) -> Vec<f64> {
    let (m, p) = (q.dim(), q.factors());
    let base = flatten(q);
    let eval = |v: &[f64]| {
        let (mu, b, d) = unflatten(v, m, p);
        let sigma = &b * b.transpose() + DMatrix::from_diagonal(&d.component_mul(&d));
        gaussian_elbo(&mu, &sigma, m0, s0)
    };
    (0..base.len())
        .map(|i| {
            let h = 1e-5 * base[i].abs().max(1.0);
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Running mean and standard error per coordinate.
#[derive(Clone)]
pub struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    pub fn new(k: usize) -> Self {
        Self { n: 0, sum: vec![0.0; k], sum_sq: vec![0.0; k] }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for (i, &v) in x.iter().enumerate() {
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    pub fn std_err(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, ss)| {
                let mean = s / n;
                ((ss / n - mean * mean).max(0.0) * n / (n - 1.0) / n).sqrt()
            })
            .collect()
    }
}

/// Largest relative error of `grad_log_h` against central differences of `log_h`,
/// with the error measured relative to `max(1, |fd|)`.
pub fn gradient_error<M: Model + ?Sized>(model: &M, theta: &DVector<f64>) -> f64 {
    let g = model.grad_log_h(theta);
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let h = 1e-6 * theta[i].abs().max(1.0);
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (model.log_h(&plus) - model.log_h(&minus)) / (2.0 * h);
        worst = worst.max((g[i] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

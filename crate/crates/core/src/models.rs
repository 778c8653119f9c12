//! Targets for the variational fit: unnormalized log posteriors `log h(theta)`
//! together with their gradients.
//!
//! All normalizing constants of the priors are kept, so a lower-bound estimate
//! is a genuine lower bound on `log p(y)`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};
use crate::factor_gaussian::FactorGaussian;

/// A differentiable unnormalized log posterior.
///
/// Implementations must be deterministic and reentrant: fits call them from
/// many threads at once.
pub trait Model: Send + Sync {
    fn dim(&self) -> usize;

    fn log_h(&self, theta: &DVector<f64>) -> f64;

    fn grad_log_h(&self, theta: &DVector<f64>) -> DVector<f64>;

    /// Both at once; override when the two share work.
    fn log_h_and_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.log_h(theta), self.grad_log_h(theta))
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_h(&self, theta: &DVector<f64>) -> f64 {
        (**self).log_h(theta)
    }
    fn grad_log_h(&self, theta: &DVector<f64>) -> DVector<f64> {
        (**self).grad_log_h(theta)
    }
    fn log_h_and_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        (**self).log_h_and_grad(theta)
    }
}

impl<M: Model + ?Sized> Model for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_h(&self, theta: &DVector<f64>) -> f64 {
        (**self).log_h(theta)
    }
    fn grad_log_h(&self, theta: &DVector<f64>) -> DVector<f64> {
        (**self).grad_log_h(theta)
    }
    fn log_h_and_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        (**self).log_h_and_grad(theta)
    }
}

/// `log(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `1 / (1 + e^-t)` without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log N(x; 0, var)`.
fn log_normal_centered(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * x * x / var
}

/// Log density of `v = log x` when `x ~ C+(0, 1)`: `log 2 - log pi + v - log(1 + e^{2v})`.
pub fn log_half_cauchy_log_scale(v: f64) -> f64 {
    std::f64::consts::LN_2 - PI.ln() + v - softplus(2.0 * v)
}

fn d_log_half_cauchy_log_scale(v: f64) -> f64 {
    1.0 - 2.0 * sigmoid(2.0 * v)
}

// ---------------------------------------------------------------------------
// Gaussian test target

#[derive(Debug, Clone)]
enum GaussianCovariance {
    Factor(FactorGaussian),
    Dense { mean: DVector<f64>, chol: Cholesky<f64, Dyn>, log_norm: f64 },
}

/// A normalized Gaussian density used as a target with known answers.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    cov: GaussianCovariance,
}

impl GaussianTarget {
    /// Target `N(q.mu, B B' + D^2)`; `log h` equals `q.log_density`.
    pub fn from_factor(q: FactorGaussian) -> Result<Self> {
        q.log_det()?;
        Ok(Self { cov: GaussianCovariance::Factor(q) })
    }

    pub fn dense(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("covariance rows", mean.len(), cov.nrows())?;
        check_dim("covariance cols", mean.len(), cov.ncols())?;
        let asym = (&cov - cov.transpose()).abs().max();
        if asym.is_nan() || asym > 1e-12 * cov.abs().max().max(1.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let log_norm = -0.5 * mean.len() as f64 * (2.0 * PI).ln() - 0.5 * log_det;
        Ok(Self { cov: GaussianCovariance::Dense { mean, chol, log_norm } })
    }

    pub fn mean(&self) -> &DVector<f64> {
        match &self.cov {
            GaussianCovariance::Factor(q) => q.mu(),
            GaussianCovariance::Dense { mean, .. } => mean,
        }
    }

    /// Returns `(log h, S^-1 (theta - m0))`.
    fn eval(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        match &self.cov {
            GaussianCovariance::Factor(q) => {
                let solver = q.solver().expect("validated at construction");
                let r = theta - q.mu();
                let s = solver.solve(&r).expect("dimension checked by caller");
                (solver.gaussian_log_normalizer() - 0.5 * r.dot(&s), s)
            }
            GaussianCovariance::Dense { mean, chol, log_norm } => {
                let r = theta - mean;
                let s = chol.solve(&r);
                (log_norm - 0.5 * r.dot(&s), s)
            }
        }
    }
}

impl Model for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean().len()
    }

    fn log_h(&self, theta: &DVector<f64>) -> f64 {
        self.eval(theta).0
    }

    fn grad_log_h(&self, theta: &DVector<f64>) -> DVector<f64> {
        -self.eval(theta).1
    }

    fn log_h_and_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let (lh, s) = self.eval(theta);
        (lh, -s)
    }
}

// ---------------------------------------------------------------------------
// Logistic regression

/// Design matrix with a leading all-ones intercept column and labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDesign {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl LabeledDesign {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        check_dim("labels", x.nrows(), y.len())?;
        if x.ncols() == 0 {
            return Err(Error::MissingIntercept { row: 0, value: f64::NAN });
        }
        for (row, &value) in x.column(0).iter().enumerate() {
            if value != 1.0 {
                return Err(Error::MissingIntercept { row, value });
            }
        }
        for (row, &value) in y.iter().enumerate() {
            if value != 1.0 && value != -1.0 {
                return Err(Error::InvalidLabel { row, value });
            }
        }
        Ok(Self { x, y })
    }

    /// Prepends the intercept column to raw covariates.
    pub fn with_intercept(covariates: &DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let x = covariates.clone().insert_column(0, 1.0);
        Self::new(x, y)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    /// Columns including the intercept.
    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self { x: self.x.select_rows(rows), y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])) }
    }

    /// `(sum_i log sigma(y_i x_i' beta + offset_i), X'(y o sigma(-margin)))` with optional offsets.
    fn log_lik_and_grad(&self, beta: &DVector<f64>, offset: Option<&DVector<f64>>) -> (f64, DVector<f64>) {
        let mut eta = &self.x * beta;
        if let Some(off) = offset {
            eta += off;
        }
        let mut ll = 0.0;
        let mut weights = DVector::zeros(eta.len());
        for i in 0..eta.len() {
            let margin = self.y[i] * eta[i];
            ll -= softplus(-margin);
            weights[i] = self.y[i] * sigmoid(-margin);
        }
        (ll, weights)
    }
}

/// Bayesian logistic regression with an isotropic `N(0, prior_var I)` prior.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    data: LabeledDesign,
    prior_var: f64,
}

impl LogisticModel {
    pub const DEFAULT_PRIOR_VAR: f64 = 10.0;

    pub fn new(data: LabeledDesign, prior_var: f64) -> Result<Self> {
        if !(prior_var > 0.0 && prior_var.is_finite()) {
            return Err(Error::Config(format!("prior variance must be positive, got {prior_var}")));
        }
        Ok(Self { data, prior_var })
    }

    pub fn data(&self) -> &LabeledDesign {
        &self.data
    }

    pub fn log_likelihood(&self, theta: &DVector<f64>) -> f64 {
        self.data.log_lik_and_grad(theta, None).0
    }
}

impl Model for LogisticModel {
    fn dim(&self) -> usize {
        self.data.n_cols()
    }

    fn log_h(&self, theta: &DVector<f64>) -> f64 {
        self.log_h_and_grad(theta).0
    }

    fn grad_log_h(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.log_h_and_grad(theta).1
    }

    fn log_h_and_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let (ll, w) = self.data.log_lik_and_grad(theta, None);
        let lp: f64 = theta.iter().map(|&t| log_normal_centered(t, self.prior_var)).sum();
        let grad = self.data.x.tr_mul(&w) - theta / self.prior_var;
        (ll + lp, grad)
    }
}

// ---------------------------------------------------------------------------
// Horseshoe logistic regression

/// Parameters of the horseshoe model in the unconstrained layout `eta = (theta, v)`.
///
/// `theta = (theta_0, ..., theta_m)` starts with the intercept; `v = (log delta_1, ...,
/// log delta_m, log g)` ends with the global scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HorseshoeParam {
    pub theta: DVector<f64>,
    pub v: DVector<f64>,
}

impl HorseshoeParam {
    pub fn pack(&self) -> DVector<f64> {
        let k = self.theta.len();
        DVector::from_fn(2 * k, |i, _| if i < k { self.theta[i] } else { self.v[i - k] })
    }

    pub fn unpack(eta: &DVector<f64>) -> Result<Self> {
        if !eta.len().is_multiple_of(2) || eta.is_empty() {
            return Err(Error::Config(format!("horseshoe parameter length {} is not 2(m+1)", eta.len())));
        }
        let k = eta.len() / 2;
        Ok(Self { theta: eta.rows(0, k).into_owned(), v: eta.rows(k, k).into_owned() })
    }
}

/// Logistic regression with a horseshoe prior on the slopes, in log-scale parameters.
///
/// The intercept has its own `N(0, 10)` prior and is not shrunk. Slopes satisfy
/// `theta_j | g, delta ~ N(0, delta_j^2 g^2)`, with `delta_j, g ~ C+(0, 1)`.
#[derive(Debug, Clone)]
pub struct HorseshoeLogisticModel {
    data: LabeledDesign,
}

impl HorseshoeLogisticModel {
    pub const INTERCEPT_PRIOR_VAR: f64 = 10.0;

    pub fn new(data: LabeledDesign) -> Self {
        Self { data }
    }

    /// Number of slopes `m` (excluding the intercept).
    pub fn n_covariates(&self) -> usize {
        self.data.n_cols() - 1
    }

    pub fn data(&self) -> &LabeledDesign {
        &self.data
    }
}

impl Model for HorseshoeLogisticModel {
    fn dim(&self) -> usize {
        2 * self.data.n_cols()
    }

    fn log_h(&self, eta: &DVector<f64>) -> f64 {
        self.log_h_and_grad(eta).0
    }

    fn grad_log_h(&self, eta: &DVector<f64>) -> DVector<f64> {
        self.log_h_and_grad(eta).1
    }

    fn log_h_and_grad(&self, eta: &DVector<f64>) -> (f64, DVector<f64>) {
        let k = self.data.n_cols();
        let m = k - 1;
        let theta = eta.rows(0, k).into_owned();
        let v = eta.rows(k, k);
        let v_global = v[m];

        let (ll, w) = self.data.log_lik_and_grad(&theta, None);
        let mut grad = DVector::zeros(2 * k);
        grad.rows_mut(0, k).copy_from(&self.data.x.tr_mul(&w));

        let mut lh = ll + log_normal_centered(theta[0], Self::INTERCEPT_PRIOR_VAR);
        grad[0] -= theta[0] / Self::INTERCEPT_PRIOR_VAR;

        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let mut d_global = 0.0;
        for j in 1..=m {
            let log_sd = v[j - 1] + v_global;
            let scaled = theta[j] * (-log_sd).exp();
            let scaled2 = scaled * scaled;
            lh += -half_log_2pi - log_sd - 0.5 * scaled2;
            grad[j] -= scaled * (-log_sd).exp();
            // d/dv of the conditional normal: -1 + theta^2 e^{-2(v_j + v_g)}
            grad[k + j - 1] += scaled2 - 1.0;
            d_global += scaled2 - 1.0;
        }
        for j in 0..k {
            lh += log_half_cauchy_log_scale(v[j]);
            grad[k + j] += d_log_half_cauchy_log_scale(v[j]);
        }
        grad[k + m] += d_global;
        (lh, grad)
    }
}

// ---------------------------------------------------------------------------
// Random-intercept logistic regression

/// Fixed-effect design of the random-intercept example, one row per subject-year:
/// intercept, gender, race, age, three outpatient-visit bands and the inpatient indicator.
pub fn polypharmacy_covariates(gender: f64, race: f64, age: f64, mhv: f64, inpatient_visits: f64) -> [f64; 8] {
    let band = |lo: f64, hi: f64| if mhv >= lo && mhv <= hi { 1.0 } else { 0.0 };
    [1.0, gender, race, age, band(1.0, 5.0), band(6.0, 14.0), band(15.0, f64::INFINITY), if inpatient_visits > 0.0 { 1.0 } else { 0.0 }]
}

/// Observations grouped by subject, with 0-based subject indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDesign {
    design: LabeledDesign,
    subject: Vec<usize>,
    n_subjects: usize,
}

impl GroupedDesign {
    pub fn new(design: LabeledDesign, subject: Vec<usize>, n_subjects: usize) -> Result<Self> {
        check_dim("subject ids", design.n_rows(), subject.len())?;
        for (row, &id) in subject.iter().enumerate() {
            if id >= n_subjects {
                return Err(Error::UnknownSubject { row, id, n_subjects });
            }
        }
        Ok(Self { design, subject, n_subjects })
    }

    pub fn design(&self) -> &LabeledDesign {
        &self.design
    }

    pub fn subjects(&self) -> &[usize] {
        &self.subject
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            design: self.design.select_rows(rows),
            subject: rows.iter().map(|&r| self.subject[r]).collect(),
            n_subjects: self.n_subjects,
        }
    }
}

/// Parameters `(beta, u, zeta)` of the random-intercept model; `zeta` is the log random-intercept SD.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedParam {
    pub beta: DVector<f64>,
    pub u: DVector<f64>,
    pub zeta: f64,
}

impl MixedParam {
    pub fn pack(&self) -> DVector<f64> {
        let k = self.beta.len();
        let n = self.u.len();
        DVector::from_fn(k + n + 1, |i, _| {
            if i < k {
                self.beta[i]
            } else if i < k + n {
                self.u[i - k]
            } else {
                self.zeta
            }
        })
    }

    pub fn unpack(theta: &DVector<f64>, n_fixed: usize) -> Result<Self> {
        if theta.len() < n_fixed + 1 {
            return Err(Error::DimensionMismatch { what: "mixed parameter", expected: n_fixed + 1, found: theta.len() });
        }
        let n = theta.len() - n_fixed - 1;
        Ok(Self { beta: theta.rows(0, n_fixed).into_owned(), u: theta.rows(n_fixed, n).into_owned(), zeta: theta[n_fixed + n] })
    }
}

/// Logistic regression with a subject-level random intercept `u_i ~ N(0, e^{2 zeta})`.
///
/// Priors: `beta ~ N(0, 100 I)`, `zeta ~ N(0, 100)`.
#[derive(Debug, Clone)]
pub struct MixedLogisticModel {
    data: GroupedDesign,
}

impl MixedLogisticModel {
    pub const FIXED_PRIOR_VAR: f64 = 100.0;
    pub const LOG_SD_PRIOR_VAR: f64 = 100.0;

    pub fn new(data: GroupedDesign) -> Self {
        Self { data }
    }

    pub fn n_fixed(&self) -> usize {
        self.data.design.n_cols()
    }

    pub fn data(&self) -> &GroupedDesign {
        &self.data
    }
}

impl Model for MixedLogisticModel {
    fn dim(&self) -> usize {
        self.n_fixed() + self.data.n_subjects + 1
    }

    fn log_h(&self, theta: &DVector<f64>) -> f64 {
        self.log_h_and_grad(theta).0
    }

    fn grad_log_h(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.log_h_and_grad(theta).1
    }

    fn log_h_and_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let k = self.n_fixed();
        let n = self.data.n_subjects;
        let beta = theta.rows(0, k).into_owned();
        let u = theta.rows(k, n);
        let zeta = theta[k + n];

        let offset = DVector::from_iterator(self.data.subject.len(), self.data.subject.iter().map(|&s| u[s]));
        let (ll, w) = self.data.design.log_lik_and_grad(&beta, Some(&offset));

        let mut grad = DVector::zeros(k + n + 1);
        grad.rows_mut(0, k).copy_from(&(self.data.design.x.tr_mul(&w) - &beta / Self::FIXED_PRIOR_VAR));
        for (obs, &s) in self.data.subject.iter().enumerate() {
            grad[k + s] += w[obs];
        }

        let mut lh = ll
            + beta.iter().map(|&b| log_normal_centered(b, Self::FIXED_PRIOR_VAR)).sum::<f64>()
            + log_normal_centered(zeta, Self::LOG_SD_PRIOR_VAR);
        let inv_sd = (-zeta).exp();
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let mut d_zeta = -zeta / Self::LOG_SD_PRIOR_VAR;
        for i in 0..n {
            let scaled = u[i] * inv_sd;
            lh += -half_log_2pi - zeta - 0.5 * scaled * scaled;
            grad[k + i] -= scaled * inv_sd;
            d_zeta += scaled * scaled - 1.0;
        }
        grad[k + n] = d_zeta;
        (lh, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn fd_check<M: Model>(model: &M, theta: &DVector<f64>) -> f64 {
        let grad = model.grad_log_h(theta);
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let h = 1e-6 * theta[i].abs().max(1.0);
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (model.log_h(&plus) - model.log_h(&minus)) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
        }
        worst
    }

    #[test]
    fn stable_scalar_helpers() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((log_half_cauchy_log_scale(0.0) + PI.ln()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_target_scalar() {
        let t = GaussianTarget::dense(dvector![0.0], dmatrix![1.0]).unwrap();
        let (lh, g) = t.log_h_and_grad(&dvector![2.0]);
        assert!((lh - (-0.5 * (2.0 * PI).ln() - 2.0)).abs() < 1e-15);
        assert_eq!(g, dvector![-2.0]);
        assert_eq!(t.grad_log_h(&dvector![0.0]), dvector![0.0]);
    }

    #[test]
    fn gaussian_target_rejects_non_spd() {
        assert!(matches!(GaussianTarget::dense(dvector![0.0, 0.0], dmatrix![1.0, 2.0; 2.0, 1.0]), Err(Error::NotPositiveDefinite)));
        assert!(GaussianTarget::dense(dvector![0.0, 0.0], dmatrix![1.0, 0.5; 0.4, 1.0]).is_err());
    }

    #[test]
    fn factor_and_dense_targets_agree() {
        let q = FactorGaussian::new(dvector![1.0, -1.0, 0.5], dmatrix![0.8; 0.3; -0.6], dvector![0.5, 0.9, 0.4]).unwrap();
        let dense = GaussianTarget::dense(q.mu().clone(), q.materialize_covariance()).unwrap();
        let fac = GaussianTarget::from_factor(q).unwrap();
        let theta = dvector![0.2, 0.3, -1.0];
        assert!((dense.log_h(&theta) - fac.log_h(&theta)).abs() < 1e-12);
        assert!((dense.grad_log_h(&theta) - fac.grad_log_h(&theta)).amax() < 1e-12);
    }

    #[test]
    fn labels_and_intercept_are_validated() {
        let x = dmatrix![1.0, 0.5; 1.0, -0.5];
        assert!(matches!(LabeledDesign::new(x.clone(), dvector![1.0, 0.0]), Err(Error::InvalidLabel { row: 1, .. })));
        assert!(matches!(
            LabeledDesign::new(dmatrix![1.0, 0.5; 2.0, -0.5], dvector![1.0, -1.0]),
            Err(Error::MissingIntercept { row: 1, .. })
        ));
        assert!(LabeledDesign::new(x, dvector![1.0, -1.0]).is_ok());
    }

    #[test]
    fn logistic_at_zero() {
        let data = LabeledDesign::with_intercept(&dmatrix![0.3; -1.2; 2.0], dvector![1.0, -1.0, 1.0]).unwrap();
        let model = LogisticModel::new(data, 10.0).unwrap();
        let zero = DVector::zeros(2);
        assert!((model.log_likelihood(&zero) + 3.0 * 2f64.ln()).abs() < 1e-14);

        let single = LabeledDesign::new(dmatrix![1.0], dvector![1.0]).unwrap();
        let model = LogisticModel::new(single, 10.0).unwrap();
        assert_eq!(model.grad_log_h(&dvector![0.0]), dvector![0.5]);
        assert!(LogisticModel::new(model.data().clone(), 0.0).is_err());
    }

    #[test]
    fn horseshoe_unit_scales() {
        let data = LabeledDesign::with_intercept(&dmatrix![0.3, 1.0; -1.2, 0.0], dvector![1.0, -1.0]).unwrap();
        let model = HorseshoeLogisticModel::new(data.clone());
        assert_eq!(model.dim(), 6);
        let theta = dvector![0.0, 0.4, -0.7];
        let eta = HorseshoeParam { theta: theta.clone(), v: DVector::zeros(3) }.pack();
        let expected = LogisticModel::new(data, 10.0).unwrap().log_likelihood(&theta)
            + log_normal_centered(0.0, 10.0)
            + log_normal_centered(0.4, 1.0)
            + log_normal_centered(-0.7, 1.0)
            - 3.0 * PI.ln();
        assert!((model.log_h(&eta) - expected).abs() < 1e-13);
    }

    #[test]
    fn horseshoe_layout_roundtrip() {
        let p = HorseshoeParam { theta: dvector![1.0, 2.0, 3.0], v: dvector![-1.0, -2.0, -3.0] };
        let eta = p.pack();
        assert_eq!(eta, dvector![1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
        assert_eq!(HorseshoeParam::unpack(&eta).unwrap(), p);
        assert!(HorseshoeParam::unpack(&dvector![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn horseshoe_gradient_matches_fd() {
        let data =
            LabeledDesign::with_intercept(&dmatrix![0.3, 1.0, -0.2; -1.2, 0.0, 0.9; 0.5, 0.5, 0.5], dvector![1.0, -1.0, 1.0]).unwrap();
        let model = HorseshoeLogisticModel::new(data);
        let eta = dvector![0.1, -0.4, 0.8, 0.3, 0.2, -0.5, 0.7, -0.1];
        assert!(fd_check(&model, &eta) < 1e-6);
    }

    #[test]
    fn polypharmacy_indicator_bands() {
        assert_eq!(polypharmacy_covariates(1.0, 0.0, 0.4, 0.0, 0.0), [1.0, 1.0, 0.0, 0.4, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(polypharmacy_covariates(0.0, 1.0, 0.1, 5.0, 2.0)[4..], [1.0, 0.0, 0.0, 1.0]);
        assert_eq!(polypharmacy_covariates(0.0, 1.0, 0.1, 6.0, 0.0)[4..], [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(polypharmacy_covariates(0.0, 1.0, 0.1, 14.0, 0.0)[4..], [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(polypharmacy_covariates(0.0, 1.0, 0.1, 15.0, 0.0)[4..], [0.0, 0.0, 1.0, 0.0]);
    }

    fn small_grouped() -> GroupedDesign {
        let design =
            LabeledDesign::with_intercept(&dmatrix![0.5; -1.0; 0.2; 1.5; 0.0; -0.3], dvector![1.0, -1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        GroupedDesign::new(design, vec![0, 0, 0, 1, 1, 1], 2).unwrap()
    }

    #[test]
    fn mixed_blockwise_random_intercept_gradient() {
        let data = small_grouped();
        let model = MixedLogisticModel::new(data.clone());
        assert_eq!(model.dim(), 2 + 2 + 1);
        let beta = dvector![0.3, -0.6];
        let theta = MixedParam { beta: beta.clone(), u: DVector::zeros(2), zeta: 0.7 }.pack();
        let g = model.grad_log_h(&theta);
        let x = data.design().x();
        let y = data.design().y();
        for subject in 0..2 {
            let expected: f64 =
                (0..6).filter(|&r| data.subjects()[r] == subject).map(|r| y[r] * sigmoid(-y[r] * (x.row(r) * &beta)[0])).sum();
            assert!((g[2 + subject] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn mixed_zero_likelihood_and_fd() {
        let model = MixedLogisticModel::new(small_grouped());
        let theta = MixedParam { beta: DVector::zeros(2), u: DVector::zeros(2), zeta: 0.0 }.pack();
        let prior = 2.0 * log_normal_centered(0.0, 100.0) + log_normal_centered(0.0, 100.0) + 2.0 * log_normal_centered(0.0, 1.0);
        assert!((model.log_h(&theta) - (prior - 6.0 * 2f64.ln())).abs() < 1e-13);
        assert!(fd_check(&model, &dvector![0.2, -0.4, 0.9, -1.1, -0.3]) < 1e-6);
    }

    #[test]
    fn mixed_rejects_unknown_subject() {
        let design = LabeledDesign::new(dmatrix![1.0; 1.0], dvector![1.0, -1.0]).unwrap();
        assert!(matches!(GroupedDesign::new(design, vec![0, 3], 2), Err(Error::UnknownSubject { row: 1, id: 3, .. })));
    }

    #[test]
    fn mixed_param_roundtrip() {
        let p = MixedParam { beta: dvector![1.0, 2.0], u: dvector![3.0, 4.0, 5.0], zeta: -0.5 };
        assert_eq!(MixedParam::unpack(&p.pack(), 2).unwrap(), p);
    }
}

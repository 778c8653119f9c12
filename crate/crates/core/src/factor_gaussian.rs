//! The low-rank-plus-diagonal Gaussian family `N(mu, B B' + D^2)`.
//!
//! `B` is `m x p` with its strict upper triangle held at zero and `D = diag(d)`.
//! Every solve and log-determinant goes through the `p x p` interior matrix
//! `I + B' D^-2 B`, so nothing here costs more than `O(m p^2 + p^3)` time or
//! `O(m p)` memory. The one exception is [`FactorGaussian::materialize_covariance`],
//! which exists for small-instance checks.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// Smallest magnitude allowed for an entry of `d`.
///
/// `D^-2` appears in the Woodbury form, so `d_i = 0` is a hard singularity.
/// Only the magnitude is guarded; the sign of `d_i` is free.
pub const D_FLOOR: f64 = 1e-8;

/// Variational parameters `(mu, B, d)` of a factor-covariance Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGaussian {
    pub(crate) mu: DVector<f64>,
    pub(crate) b: DMatrix<f64>,
    pub(crate) d: DVector<f64>,
}

/// One draw of base noise: `z ~ N(0, I_p)` in factor space and `eps ~ N(0, I_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseNoise {
    pub z: DVector<f64>,
    pub eps: DVector<f64>,
}

impl BaseNoise {
    pub fn new(z: DVector<f64>, eps: DVector<f64>) -> Self {
        Self { z, eps }
    }

    pub fn zeros(m: usize, p: usize) -> Self {
        Self { z: DVector::zeros(p), eps: DVector::zeros(m) }
    }

    /// Draws `(z, eps)` from the caller's generator. `z` is drawn first.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, m: usize, p: usize) -> Self {
        let z = DVector::from_fn(p, |_, _| rng.sample(StandardNormal));
        let eps = DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
        Self { z, eps }
    }

    pub(crate) fn check(&self, q: &FactorGaussian) -> Result<()> {
        check_dim("noise z", q.factors(), self.z.len())?;
        check_dim("noise eps", q.dim(), self.eps.len())
    }
}

impl FactorGaussian {
    /// Builds and validates a factor Gaussian.
    ///
    /// Rejects mismatched shapes, `p > m`, nonzero entries above the diagonal
    /// of `B`, and any `|d_i| < D_FLOOR`.
    pub fn new(mu: DVector<f64>, b: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        let m = mu.len();
        check_dim("B rows", m, b.nrows())?;
        check_dim("d", m, d.len())?;
        let p = b.ncols();
        if p > m {
            return Err(Error::TooManyFactors { m, p });
        }
        for col in 0..p {
            for row in 0..col {
                if b[(row, col)] != 0.0 {
                    return Err(Error::UpperTriangleNonZero { row, col });
                }
            }
        }
        for (index, &value) in d.iter().enumerate() {
            if value.is_nan() || value.abs() < D_FLOOR {
                return Err(Error::ScaleBelowFloor { index, value, floor: D_FLOOR });
            }
        }
        Ok(Self { mu, b, d })
    }

    /// `N(mu, diag(d)^2)`, the `p = 0` member of the family.
    pub fn diagonal(mu: DVector<f64>, d: DVector<f64>) -> Result<Self> {
        let m = mu.len();
        Self::new(mu, DMatrix::zeros(m, 0), d)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn factors(&self) -> usize {
        self.b.ncols()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        (self.mu, self.b, self.d)
    }

    /// `B z + d o eps`, the centred part of a reparametrized draw.
    pub fn noise_offset(&self, noise: &BaseNoise) -> Result<DVector<f64>> {
        noise.check(self)?;
        let mut r = self.d.component_mul(&noise.eps);
        if self.factors() > 0 {
            r.gemv(1.0, &self.b, &noise.z, 1.0);
        }
        Ok(r)
    }

    /// `theta = mu + B z + d o eps`.
    pub fn transform(&self, noise: &BaseNoise) -> Result<DVector<f64>> {
        Ok(&self.mu + self.noise_offset(noise)?)
    }

    /// Factorizes the interior `p x p` system once so that several solves can share it.
    pub fn solver(&self) -> Result<FactorSolver<'_>> {
        FactorSolver::new(self)
    }

    /// Solves `(B B' + D^2) x = v` via the Woodbury identity.
    pub fn woodbury_solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.solver()?.solve(v)
    }

    /// `log |B B' + D^2|` via the matrix determinant lemma.
    pub fn log_det(&self) -> Result<f64> {
        Ok(self.solver()?.log_det())
    }

    pub fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        check_dim("theta", self.dim(), theta.len())?;
        let solver = self.solver()?;
        let r = theta - &self.mu;
        let quad = r.dot(&solver.solve(&r)?);
        Ok(solver.gaussian_log_normalizer() - 0.5 * quad)
    }

    /// Diagonal of `B B' + D^2` in `O(m p)`.
    pub fn marginal_variances(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.d[i] * self.d[i] + self.b.row(i).iter().map(|x| x * x).sum::<f64>())
    }

    /// Dense `B B' + D^2`. Quadratic memory; meant for `m` up to a few thousand.
    pub fn materialize_covariance(&self) -> DMatrix<f64> {
        let mut sigma = &self.b * self.b.transpose();
        for i in 0..self.dim() {
            sigma[(i, i)] += self.d[i] * self.d[i];
        }
        sigma
    }
}

/// Precomputed Woodbury factorization of `B B' + D^2`.
///
/// Holds `D^-2`, `W = D^-2 B` and the Cholesky factor of `I + B' W`.
pub struct FactorSolver<'a> {
    q: &'a FactorGaussian,
    inv_d2: DVector<f64>,
    w: DMatrix<f64>,
    interior: Option<Cholesky<f64, Dyn>>,
}

impl<'a> FactorSolver<'a> {
    fn new(q: &'a FactorGaussian) -> Result<Self> {
        let inv_d2 = q.d.map(|x| 1.0 / (x * x));
        let p = q.factors();
        let mut w = q.b.clone();
        for (mut row, s) in w.row_iter_mut().zip(inv_d2.iter()) {
            row *= *s;
        }
        let interior = if p == 0 {
            None
        } else {
            let mut m_int = q.b.transpose() * &w;
            for k in 0..p {
                m_int[(k, k)] += 1.0;
            }
            if m_int.iter().any(|x| !x.is_finite()) {
                return Err(Error::Singular { p });
            }
            Some(Cholesky::new(m_int).ok_or(Error::Singular { p })?)
        };
        Ok(Self { q, inv_d2, w, interior })
    }

    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("rhs", self.q.dim(), v.len())?;
        let mut x = self.inv_d2.component_mul(v);
        if let Some(chol) = &self.interior {
            let inner = chol.solve(&self.w.tr_mul(v));
            x.gemv(-1.0, &self.w, &inner, 1.0);
        }
        Ok(x)
    }

    /// Applies `(B B' + D^2)^-1` to each column of `rhs`.
    pub fn solve_columns(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("rhs rows", self.q.dim(), rhs.nrows())?;
        let mut x = rhs.clone();
        for (mut row, s) in x.row_iter_mut().zip(self.inv_d2.iter()) {
            row *= *s;
        }
        if let Some(chol) = &self.interior {
            let inner = chol.solve(&self.w.tr_mul(rhs));
            x.gemm(-1.0, &self.w, &inner, 1.0);
        }
        Ok(x)
    }

    pub fn log_det(&self) -> f64 {
        let interior = self.interior.as_ref().map_or(0.0, |chol| 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>());
        interior - self.inv_d2.iter().map(|x| x.ln()).sum::<f64>()
    }

    /// Diagonal of `(B B' + D^2)^-1`, `O(m p^2)`.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let mut diag = self.inv_d2.clone();
        if let Some(chol) = &self.interior {
            // w_i' M^-1 w_i = |L^-1 w_i|^2, solved for all rows at once.
            let l = chol.l();
            let half = l.solve_lower_triangular(&self.w.transpose()).expect("Cholesky factor has a positive diagonal");
            for (i, col) in half.column_iter().enumerate() {
                diag[i] -= col.norm_squared();
            }
        }
        diag
    }

    /// `-(m/2) log 2 pi - (1/2) log |Sigma|`.
    pub fn gaussian_log_normalizer(&self) -> f64 {
        -0.5 * self.q.dim() as f64 * (2.0 * PI).ln() - 0.5 * self.log_det()
    }
}

/// `KL(q1 || q2)` between two factor Gaussians of the same dimension.
///
/// The factor counts may differ. The trace term is assembled as
/// `sum_k b1_k' S2^-1 b1_k + sum_i d1_i^2 (S2^-1)_ii` so no `m x m` matrix is formed.
pub fn kl_gaussians(q1: &FactorGaussian, q2: &FactorGaussian) -> Result<f64> {
    check_dim("kl dimension", q1.dim(), q2.dim())?;
    let m = q1.dim() as f64;
    let s1 = q1.solver()?;
    let s2 = q2.solver()?;

    let solved_b1 = s2.solve_columns(&q1.b)?;
    let trace_factor: f64 = q1.b.component_mul(&solved_b1).sum();
    let inv_diag2 = s2.inverse_diagonal();
    let trace_diag: f64 = q1.d.iter().zip(inv_diag2.iter()).map(|(d, s)| d * d * s).sum();

    let delta = &q2.mu - &q1.mu;
    let mahalanobis = delta.dot(&s2.solve(&delta)?);

    Ok(0.5 * (trace_factor + trace_diag + mahalanobis - m + s2.log_det() - s1.log_det()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn two_by_one(b: DMatrix<f64>) -> FactorGaussian {
        FactorGaussian::new(dvector![0.0, 0.0], b, dvector![1.0, 1.0]).unwrap()
    }

    #[test]
    fn transform_zero_noise_is_mean() {
        let q = FactorGaussian::new(dvector![1.0, -2.0], dmatrix![0.5; 3.0], dvector![0.2, 0.4]).unwrap();
        assert_eq!(q.transform(&BaseNoise::zeros(2, 1)).unwrap(), dvector![1.0, -2.0]);
    }

    #[test]
    fn transform_without_factors() {
        let q = FactorGaussian::diagonal(dvector![1.0, 2.0], dvector![0.5, -3.0]).unwrap();
        let noise = BaseNoise::new(DVector::zeros(0), dvector![2.0, 1.0]);
        assert_eq!(q.transform(&noise).unwrap(), dvector![2.0, -1.0]);
    }

    #[test]
    fn transform_hand_example() {
        let q = two_by_one(dmatrix![1.0; 2.0]);
        let noise = BaseNoise::new(dvector![3.0], dvector![1.0, -1.0]);
        assert_eq!(q.transform(&noise).unwrap(), dvector![4.0, 5.0]);
    }

    #[test]
    fn transform_rejects_wrong_noise() {
        let q = two_by_one(dmatrix![1.0; 2.0]);
        let err = q.transform(&BaseNoise::zeros(3, 1)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn construction_checks() {
        let upper = FactorGaussian::new(dvector![0.0, 0.0], dmatrix![1.0, 1.0; 0.0, 1.0], dvector![1.0, 1.0]);
        assert!(matches!(upper, Err(Error::UpperTriangleNonZero { row: 0, col: 1 })));
        let floor = FactorGaussian::diagonal(dvector![0.0], dvector![1e-9]);
        assert!(matches!(floor, Err(Error::ScaleBelowFloor { index: 0, .. })));
        let wide = FactorGaussian::new(dvector![0.0], dmatrix![1.0, 0.0], dvector![1.0]);
        assert!(matches!(wide, Err(Error::TooManyFactors { m: 1, p: 2 })));
        // Negative d is fine; only the magnitude is floored.
        assert!(FactorGaussian::diagonal(dvector![0.0], dvector![-0.5]).is_ok());
    }

    #[test]
    fn woodbury_identity_covariance() {
        let q = FactorGaussian::new(DVector::zeros(3), DMatrix::zeros(3, 2), DVector::repeat(3, 1.0)).unwrap();
        let v = dvector![1.0, -2.0, 0.5];
        assert_eq!(q.woodbury_solve(&v).unwrap(), v);
    }

    #[test]
    fn woodbury_hand_example() {
        let q = two_by_one(dmatrix![1.0; 0.0]);
        let x = q.woodbury_solve(&dvector![1.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_det_examples() {
        let id = FactorGaussian::new(DVector::zeros(4), DMatrix::zeros(4, 2), DVector::repeat(4, 1.0)).unwrap();
        assert_eq!(id.log_det().unwrap(), 0.0);
        let q = two_by_one(dmatrix![1.0; 0.0]);
        assert!((q.log_det().unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_density_examples() {
        let std = FactorGaussian::diagonal(dvector![0.0], dvector![1.0]).unwrap();
        let expected = -0.5 * (2.0 * PI).ln();
        assert!((std.log_density(&dvector![0.0]).unwrap() - expected).abs() < 1e-15);

        let q = FactorGaussian::new(dvector![1.0, 2.0, 3.0], dmatrix![1.0; 0.5; -0.3], dvector![0.4, 0.7, 1.1]).unwrap();
        let at_mean = q.log_density(q.mu()).unwrap();
        let expected = -1.5 * (2.0 * PI).ln() - 0.5 * q.log_det().unwrap();
        assert!((at_mean - expected).abs() < 1e-14);
    }

    #[test]
    fn kl_examples() {
        let q = FactorGaussian::new(dvector![1.0, 2.0], dmatrix![1.0; 0.5], dvector![0.4, 0.7]).unwrap();
        assert!(kl_gaussians(&q, &q).unwrap().abs() < 1e-14);
        let a = FactorGaussian::diagonal(dvector![0.0], dvector![1.0]).unwrap();
        let b = FactorGaussian::diagonal(dvector![1.0], dvector![1.0]).unwrap();
        assert!((kl_gaussians(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let c = FactorGaussian::diagonal(dvector![0.0, 0.0], dvector![1.0, 1.0]).unwrap();
        assert!(kl_gaussians(&a, &c).is_err());
    }

    #[test]
    fn materialize_examples() {
        let q = FactorGaussian::diagonal(dvector![0.0, 0.0], dvector![2.0, -3.0]).unwrap();
        assert_eq!(q.materialize_covariance(), dmatrix![4.0, 0.0; 0.0, 9.0]);
        let q = two_by_one(dmatrix![1.0; 2.0]);
        let s = q.materialize_covariance();
        assert_eq!(s, dmatrix![2.0, 2.0; 2.0, 5.0]);
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn marginal_variances_match_dense_diagonal() {
        let q = FactorGaussian::new(dvector![0.0, 0.0, 0.0], dmatrix![1.0, 0.0; 2.0, -1.0; 0.5, 0.5], dvector![0.3, 0.2, 1.0]).unwrap();
        assert_eq!(q.marginal_variances(), q.materialize_covariance().diagonal());
    }

    #[test]
    fn singular_interior_is_reported() {
        let q = FactorGaussian::new(dvector![0.0], dmatrix![f64::INFINITY], dvector![1.0]).unwrap();
        assert!(matches!(q.log_det(), Err(Error::Singular { p: 1 })));
    }
}

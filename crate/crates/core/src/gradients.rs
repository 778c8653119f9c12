//! Reparametrized single-draw estimators of the lower-bound gradient.
//!
//! For `theta = mu + B z + d o eps`, write `r = B z + d o eps` and
//! `s = (B B' + D^2)^-1 r`. With `g = grad log h(theta)` the compact estimators are
//!
//! ```text
//! grad_mu = g
//! grad_B  = (g + s) z'          (upper triangle zeroed)
//! grad_d  = (g + s) o eps
//! ```
//!
//! The four-term forms add `S^-1 B - s s' B` (resp. `diag(S^-1) o d - s o s o d`),
//! which has mean zero but does not vanish per draw. They are kept for
//! comparison; fits use the compact forms.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::factor_gaussian::{BaseNoise, FactorGaussian, FactorSolver};
use crate::models::Model;

/// All single-draw estimates for one noise draw.
#[derive(Debug, Clone)]
pub struct GradientSample {
    pub noise: BaseNoise,
    pub g_mu: DVector<f64>,
    pub g_b: DMatrix<f64>,
    pub g_d: DVector<f64>,
    /// `log h(theta) - log q(theta)` at the drawn `theta`.
    pub elbo_sample: f64,
}

/// Shared per-draw quantities.
struct Draw {
    theta: DVector<f64>,
    log_h: f64,
    grad: DVector<f64>,
    /// `(B B' + D^2)^-1 (B z + d o eps)`
    s: DVector<f64>,
    /// `log q(theta)`
    log_q: f64,
}

fn evaluate<M: Model + ?Sized>(model: &M, q: &FactorGaussian, solver: &FactorSolver<'_>, noise: &BaseNoise) -> Result<Draw> {
    check_dim("model dimension", q.dim(), model.dim())?;
    let r = q.noise_offset(noise)?;
    let theta = q.mu() + &r;
    let (log_h, grad) = model.log_h_and_grad(&theta);
    check_dim("model gradient", q.dim(), grad.len())?;
    if !grad.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite { what: "model gradient", theta: theta.as_slice().to_vec() });
    }
    let s = solver.solve(&r)?;
    let log_q = solver.gaussian_log_normalizer() - 0.5 * r.dot(&s);
    Ok(Draw { theta, log_h, grad, s, log_q })
}

fn zero_upper(mut g: DMatrix<f64>) -> DMatrix<f64> {
    for col in 1..g.ncols() {
        for row in 0..col.min(g.nrows()) {
            g[(row, col)] = 0.0;
        }
    }
    g
}

fn compact_b(draw: &Draw, z: &DVector<f64>) -> DMatrix<f64> {
    zero_upper((&draw.grad + &draw.s) * z.transpose())
}

fn compact_d(draw: &Draw, eps: &DVector<f64>) -> DVector<f64> {
    (&draw.grad + &draw.s).component_mul(eps)
}

/// Computes every estimate from one draw, sharing the model call and the Woodbury factorization.
pub fn sample_gradient<M: Model + ?Sized>(model: &M, q: &FactorGaussian, noise: BaseNoise) -> Result<GradientSample> {
    let solver = q.solver()?;
    let draw = evaluate(model, q, &solver, &noise)?;
    let elbo_sample = draw.log_h - draw.log_q;
    if !elbo_sample.is_finite() {
        return Err(Error::NonFinite { what: "lower-bound sample", theta: draw.theta.as_slice().to_vec() });
    }
    let g_b = compact_b(&draw, &noise.z);
    let g_d = compact_d(&draw, &noise.eps);
    Ok(GradientSample { g_mu: draw.grad, g_b, g_d, elbo_sample, noise })
}

/// Single-draw estimate of the mean gradient: `grad log h(mu + B z + d o eps)`.
pub fn grad_mu<M: Model + ?Sized>(model: &M, q: &FactorGaussian, noise: &BaseNoise) -> Result<DVector<f64>> {
    let solver = q.solver()?;
    Ok(evaluate(model, q, &solver, noise)?.grad)
}

/// Compact single-draw estimate of the gradient in `B`.
pub fn grad_b_compact<M: Model + ?Sized>(model: &M, q: &FactorGaussian, noise: &BaseNoise) -> Result<DMatrix<f64>> {
    let solver = q.solver()?;
    let draw = evaluate(model, q, &solver, noise)?;
    Ok(compact_b(&draw, &noise.z))
}

/// Four-term single-draw estimate of the gradient in `B`.
pub fn grad_b_full<M: Model + ?Sized>(model: &M, q: &FactorGaussian, noise: &BaseNoise) -> Result<DMatrix<f64>> {
    let solver = q.solver()?;
    let draw = evaluate(model, q, &solver, noise)?;
    let mut g = (&draw.grad + &draw.s) * noise.z.transpose();
    g += solver.solve_columns(q.b())?;
    let bs = q.b().tr_mul(&draw.s);
    g -= &draw.s * bs.transpose();
    Ok(zero_upper(g))
}

/// Compact single-draw estimate of the gradient in `d`.
pub fn grad_d_compact<M: Model + ?Sized>(model: &M, q: &FactorGaussian, noise: &BaseNoise) -> Result<DVector<f64>> {
    let solver = q.solver()?;
    let draw = evaluate(model, q, &solver, noise)?;
    Ok(compact_d(&draw, &noise.eps))
}

/// Four-term single-draw estimate of the gradient in `d`.
pub fn grad_d_full<M: Model + ?Sized>(model: &M, q: &FactorGaussian, noise: &BaseNoise) -> Result<DVector<f64>> {
    let solver = q.solver()?;
    let draw = evaluate(model, q, &solver, noise)?;
    let inv_diag = solver.inverse_diagonal();
    let d = q.d();
    Ok(DVector::from_fn(q.dim(), |i, _| (draw.grad[i] + draw.s[i]) * noise.eps[i] + inv_diag[i] * d[i] - draw.s[i] * draw.s[i] * d[i]))
}

/// Monte Carlo lower bound: mean of `log h(theta) - log q(theta)` over the given draws.
pub fn elbo_estimate<M: Model + ?Sized>(model: &M, q: &FactorGaussian, noises: &[BaseNoise]) -> Result<f64> {
    if noises.is_empty() {
        return Err(Error::Config("lower-bound estimate needs at least one draw".into()));
    }
    check_dim("model dimension", q.dim(), model.dim())?;
    let solver = q.solver()?;
    let log_norm = solver.gaussian_log_normalizer();
    let mut total = 0.0;
    for noise in noises {
        let r = q.noise_offset(noise)?;
        let theta = q.mu() + &r;
        let lh = model.log_h(&theta);
        if !lh.is_finite() {
            return Err(Error::NonFinite { what: "log h", theta: theta.as_slice().to_vec() });
        }
        total += lh - (log_norm - 0.5 * r.dot(&solver.solve(&r)?));
    }
    Ok(total / noises.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianTarget;
    use nalgebra::{dmatrix, dvector};

    fn q_star() -> FactorGaussian {
        FactorGaussian::new(
            dvector![0.5, -1.0, 2.0, 0.0],
            dmatrix![0.9, 0.0; -0.4, 0.7; 0.3, 0.2; 1.1, -0.5],
            dvector![0.6, -0.3, 0.8, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_gaussian_target_has_zero_mean_gradient() {
        let q = q_star();
        let target = GaussianTarget::from_factor(q.clone()).unwrap();
        let g = grad_mu(&target, &q, &BaseNoise::zeros(4, 2)).unwrap();
        assert!(g.amax() < 1e-15);
    }

    #[test]
    fn mode_matched_mean_gradient_is_minus_solved_offset() {
        let q = q_star();
        let target = GaussianTarget::from_factor(q.clone()).unwrap();
        let noise = BaseNoise::new(dvector![0.3, -1.2], dvector![1.0, 0.5, -0.7, 2.0]);
        let g = grad_mu(&target, &q, &noise).unwrap();
        let expected = -q.woodbury_solve(&q.noise_offset(&noise).unwrap()).unwrap();
        assert!((g - expected).amax() < 1e-12);
    }

    #[test]
    fn compact_estimators_vanish_at_mode_full_do_not() {
        let q = q_star();
        let target = GaussianTarget::from_factor(q.clone()).unwrap();
        let noise = BaseNoise::new(dvector![0.3, -1.2], dvector![1.0, 0.5, -0.7, 2.0]);
        assert!(grad_b_compact(&target, &q, &noise).unwrap().amax() < 1e-12);
        assert!(grad_d_compact(&target, &q, &noise).unwrap().amax() < 1e-12);
        assert!(grad_b_full(&target, &q, &noise).unwrap().amax() > 1e-3);
        assert!(grad_d_full(&target, &q, &noise).unwrap().amax() > 1e-3);
    }

    #[test]
    fn no_factor_block_gives_empty_b_gradient() {
        let q = FactorGaussian::diagonal(dvector![0.0, 1.0], dvector![1.0, 2.0]).unwrap();
        let target = GaussianTarget::dense(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 1.0]).unwrap();
        let g = grad_b_compact(&target, &q, &BaseNoise::new(DVector::zeros(0), dvector![0.5, -0.5])).unwrap();
        assert_eq!(g.shape(), (2, 0));
    }

    #[test]
    fn full_d_with_zero_noise_is_inverse_diagonal_times_d() {
        let q = q_star();
        // Zero noise puts theta at mu; a target centred there has zero gradient.
        let target_at_mu = GaussianTarget::dense(q.mu().clone(), DMatrix::identity(4, 4)).unwrap();
        let g = grad_d_full(&target_at_mu, &q, &BaseNoise::zeros(4, 2)).unwrap();
        let dense_inv = q.materialize_covariance().try_inverse().unwrap();
        let expected = dense_inv.diagonal().component_mul(q.d());
        assert!((g - expected).amax() < 1e-12);
    }

    #[test]
    fn gradient_upper_triangle_is_zero() {
        let q =
            FactorGaussian::new(dvector![0.0, 0.0, 0.0], dmatrix![1.0, 0.0, 0.0; 0.5, 1.0, 0.0; 0.1, 0.2, 1.0], dvector![1.0, 1.0, 1.0])
                .unwrap();
        let target = GaussianTarget::dense(dvector![1.0, 1.0, 1.0], DMatrix::identity(3, 3)).unwrap();
        let noise = BaseNoise::new(dvector![1.0, -1.0, 0.5], dvector![0.2, 0.3, -0.4]);
        for g in [grad_b_compact(&target, &q, &noise).unwrap(), grad_b_full(&target, &q, &noise).unwrap()] {
            assert_eq!((g[(0, 1)], g[(0, 2)], g[(1, 2)]), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn self_density_gives_zero_elbo() {
        let q = q_star();
        let target = GaussianTarget::from_factor(q.clone()).unwrap();
        let noises = [
            BaseNoise::new(dvector![0.3, -1.2], dvector![1.0, 0.5, -0.7, 2.0]),
            BaseNoise::new(dvector![-2.0, 0.1], dvector![0.0, 0.5, 0.3, -1.0]),
        ];
        for n in &noises {
            assert!(elbo_estimate(&target, &q, std::slice::from_ref(n)).unwrap().abs() < 1e-12);
        }
        assert!(elbo_estimate(&target, &q, &[]).is_err());
    }

    #[test]
    fn non_finite_gradient_is_reported_with_theta() {
        struct Broken;
        impl Model for Broken {
            fn dim(&self) -> usize {
                1
            }
            fn log_h(&self, _: &DVector<f64>) -> f64 {
                0.0
            }
            fn grad_log_h(&self, _: &DVector<f64>) -> DVector<f64> {
                dvector![f64::NAN]
            }
        }
        let q = FactorGaussian::diagonal(dvector![3.0], dvector![1.0]).unwrap();
        match grad_mu(&Broken, &q, &BaseNoise::zeros(1, 0)) {
            Err(Error::NonFinite { theta, .. }) => assert_eq!(theta, vec![3.0]),
            other => panic!("unexpected {other:?}"),
        }
    }
}

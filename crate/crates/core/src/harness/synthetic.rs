//! Seeded synthetic targets and datasets.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::data::{Dataset, Subjects};
use crate::factor_gaussian::FactorGaussian;
use crate::models::{sigmoid, LabeledDesign};

/// Random `N(mu, B B' + D^2)` with rank `p`.
///
/// Means and sub-diagonal loadings are standard normal. The leading diagonal
/// loadings and the `d_i` are uniform on `[0.5, 1.5]`, which keeps the target
/// away from the flat directions of the zero-upper-triangle parametrization.
pub fn factor_target(m: usize, p: usize, seed: u64) -> FactorGaussian {
    assert!(p <= m, "p = {p} > m = {m}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
    let mut b = DMatrix::zeros(m, p);
    for k in 0..p {
        b[(k, k)] = rng.random_range(0.5..1.5);
        for i in k + 1..m {
            b[(i, k)] = rng.sample(StandardNormal);
        }
    }
    let d = DVector::from_fn(m, |_, _| rng.random_range(0.5..1.5));
    FactorGaussian::new(mu, b, d).expect("valid by construction")
}

fn gaussian_covariates(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.sample(StandardNormal))
}

fn draw_labels(rng: &mut ChaCha8Rng, eta: &DVector<f64>) -> DVector<f64> {
    eta.map(|e| if rng.random::<f64>() < sigmoid(e) { 1.0 } else { -1.0 })
}

fn names(m: usize) -> Vec<String> {
    (1..=m).map(|j| format!("x{j}")).collect()
}

/// Logistic data with `m` standard normal covariates plus an intercept.
/// Returns the dataset and the generating coefficients (intercept first).
pub fn logistic_data(n: usize, m: usize, seed: u64) -> (Dataset, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_covariates(&mut rng, n, m);
    let beta = DVector::from_fn(m + 1, |i, _| if i == 0 { 0.5 } else { rng.sample::<f64, _>(StandardNormal) });
    let design_x = x.insert_column(0, 1.0);
    let y = draw_labels(&mut rng, &(&design_x * &beta));
    let design = LabeledDesign::new(design_x, y).expect("valid by construction");
    let data = Dataset::new(design, None, names(m), format!("synthetic logistic n={n} m={m} seed={seed}")).expect("valid");
    (data, beta)
}

/// Sparse-signal logistic data: the first `n_signal` of `m` coefficients are
/// `+3, -3, +3, ...`, the rest zero, intercept zero.
pub fn sparse_signal_data(n: usize, m: usize, n_signal: usize, seed: u64) -> (Dataset, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_covariates(&mut rng, n, m);
    let beta = DVector::from_fn(m + 1, |i, _| match i {
        0 => 0.0,
        i if i <= n_signal => {
            if i % 2 == 1 {
                3.0
            } else {
                -3.0
            }
        }
        _ => 0.0,
    });
    let design_x = x.insert_column(0, 1.0);
    let y = draw_labels(&mut rng, &(&design_x * &beta));
    let design = LabeledDesign::new(design_x, y).expect("valid by construction");
    let data = Dataset::new(design, None, names(m), format!("synthetic sparse n={n} m={m} signal={n_signal} seed={seed}")).expect("valid");
    (data, beta)
}

/// Random-intercept logistic data: `n_subjects` groups of `per_subject` rows,
/// intercepts `u_s ~ N(0, sd_u^2)`. Returns the dataset, fixed effects and intercepts.
pub fn grouped_data(n_subjects: usize, per_subject: usize, m: usize, sd_u: f64, seed: u64) -> (Dataset, DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_subjects * per_subject;
    let x = gaussian_covariates(&mut rng, n, m);
    let beta = DVector::from_fn(m + 1, |i, _| if i == 0 { -0.5 } else { rng.sample::<f64, _>(StandardNormal) });
    let u = DVector::from_fn(n_subjects, |_, _| sd_u * rng.sample::<f64, _>(StandardNormal));
    let index: Vec<usize> = (0..n).map(|r| r / per_subject).collect();
    let design_x = x.insert_column(0, 1.0);
    let eta = &design_x * &beta + DVector::from_fn(n, |r, _| u[index[r]]);
    let y = draw_labels(&mut rng, &eta);
    let design = LabeledDesign::new(design_x, y).expect("valid by construction");
    let subjects = Subjects { index, ids: (0..n_subjects).map(|s| format!("s{s}")).collect() };
    let data = Dataset::new(design, Some(subjects), names(m), format!("synthetic grouped subjects={n_subjects} m={m} seed={seed}"))
        .expect("valid");
    (data, beta, u)
}

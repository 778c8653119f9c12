//! Stochastic gradient ascent on the lower bound with per-element ADADELTA steps.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{check_dim, Error};
use crate::factor_gaussian::{BaseNoise, FactorGaussian, D_FLOOR};
use crate::gradients::{sample_gradient, GradientSample};
use crate::models::Model;

pub const ADADELTA_EPS: f64 = 1e-6;
pub const ADADELTA_DECAY: f64 = 0.95;

/// Decayed running averages `E[g^2]` and `E[delta^2]`, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    acc_g2: Vec<f64>,
    acc_dx2: Vec<f64>,
    eps: f64,
    decay: f64,
}

impl AdadeltaState {
    pub fn new(n: usize) -> Self {
        Self::with_constants(n, ADADELTA_EPS, ADADELTA_DECAY)
    }

    pub fn with_constants(n: usize, eps: f64, decay: f64) -> Self {
        assert!(eps > 0.0 && (0.0..1.0).contains(&decay), "ADADELTA needs eps > 0 and decay in [0, 1)");
        Self { acc_g2: vec![0.0; n], acc_dx2: vec![0.0; n], eps, decay }
    }

    pub fn len(&self) -> usize {
        self.acc_g2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc_g2.is_empty()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn acc_g2(&self) -> &[f64] {
        &self.acc_g2
    }

    pub fn acc_dx2(&self) -> &[f64] {
        &self.acc_dx2
    }

    /// Updates the accumulators with gradient `g` and writes the ascent step into `delta`.
    pub fn step_into(&mut self, g: &[f64], delta: &mut [f64]) {
        assert_eq!(g.len(), self.len(), "gradient length");
        assert_eq!(delta.len(), self.len(), "step length");
        let (rho, keep) = (self.eps, self.decay);
        for i in 0..g.len() {
            self.acc_g2[i] = keep * self.acc_g2[i] + (1.0 - keep) * g[i] * g[i];
            let step = ((self.acc_dx2[i] + rho).sqrt() / (self.acc_g2[i] + rho).sqrt()) * g[i];
            self.acc_dx2[i] = keep * self.acc_dx2[i] + (1.0 - keep) * step * step;
            delta[i] = step;
        }
    }

    pub fn step(&mut self, g: &[f64]) -> Vec<f64> {
        let mut delta = vec![0.0; g.len()];
        self.step_into(g, &mut delta);
        delta
    }
}

/// Trailing moving average: entry `t` is the mean of `values[t+1-window ..= t]`,
/// using however many values exist near the start.
pub fn smoothed_elbo(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be at least 1");
    (0..values.len()).map(|t| trailing_mean(values, t, window)).collect()
}

fn trailing_mean(values: &[f64], t: usize, window: usize) -> f64 {
    let start = (t + 1).saturating_sub(window);
    let slice = &values[start..=t];
    slice.iter().sum::<f64>() / slice.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Number of factors (columns of `B`).
    pub p: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Starting mean; zero when absent.
    pub init_mu: Option<DVector<f64>>,
    /// Starting value of every `d_i` (and of the Cholesky diagonal in the full baseline).
    pub init_d_scale: f64,
    /// Window of the smoothed lower bound used for stopping.
    pub stop_window: usize,
    /// Stop when the windowed mean improves by less than `stop_tol * |mean|`; `None` disables early stopping.
    pub stop_tol: Option<f64>,
    pub trace_every: usize,
    /// Report the average of the final iterates instead of the last one: the last
    /// `stop_window` after an early stop, otherwise the last `max(stop_window, max_iters / 4)`.
    pub average_tail: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            p: 3,
            max_iters: 10_000,
            seed: 0,
            init_mu: None,
            init_d_scale: 0.1,
            stop_window: 1000,
            stop_tol: Some(1e-4),
            trace_every: 10,
            average_tail: true,
        }
    }
}

impl FitConfig {
    pub fn with_p(p: usize) -> Self {
        Self { p, ..Self::default() }
    }

    pub(crate) fn validate(&self, dim: usize) -> Result<(), Error> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.p > dim {
            return Err(Error::TooManyFactors { m: dim, p: self.p });
        }
        if !self.init_d_scale.is_finite() || self.init_d_scale < D_FLOOR {
            return Err(Error::Config(format!("init_d_scale {} is below {D_FLOOR:e}", self.init_d_scale)));
        }
        if self.stop_window == 0 || self.trace_every == 0 {
            return Err(Error::Config("stop_window and trace_every must be positive".into()));
        }
        if let Some(mu) = &self.init_mu {
            check_dim("init_mu", dim, mu.len())?;
        }
        Ok(())
    }

    pub(crate) fn initial_mu(&self, dim: usize) -> DVector<f64> {
        self.init_mu.clone().unwrap_or_else(|| DVector::zeros(dim))
    }
}

/// Outcome of a fit. `Q` is the fitted distribution type.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<Q = FactorGaussian> {
    pub q_final: Q,
    /// `(iteration, smoothed lower bound)` every `trace_every` iterations, starting at 0.
    pub elbo_trace: Vec<(usize, f64)>,
    pub iters_run: usize,
    pub seed: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Error)]
pub enum FitError<Q = FactorGaussian> {
    #[error("invalid fit configuration: {0}")]
    Config(Error),
    #[error("estimator failed at iteration {iteration}: {source}")]
    Estimator { iteration: usize, snapshot: Box<Q>, source: Error },
}

/// Trace recording and the windowed stopping rule.
pub(crate) struct Monitor {
    window: usize,
    tol: Option<f64>,
    trace_every: usize,
    samples: Vec<f64>,
    trace: Vec<(usize, f64)>,
}

impl Monitor {
    pub(crate) fn new(config: &FitConfig) -> Self {
        Self {
            window: config.stop_window,
            tol: config.stop_tol,
            trace_every: config.trace_every,
            samples: Vec::with_capacity(config.max_iters),
            trace: Vec::new(),
        }
    }

    /// Records the lower-bound sample of iteration `t`; returns true when the fit should stop.
    pub(crate) fn record(&mut self, t: usize, elbo: f64) -> bool {
        self.samples.push(elbo);
        if t.is_multiple_of(self.trace_every) {
            self.trace.push((t, trailing_mean(&self.samples, t, self.window)));
        }
        let done = t + 1;
        let Some(tol) = self.tol else { return false };
        if !done.is_multiple_of(self.window) || done < 2 * self.window {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let current = mean(&self.samples[done - self.window..done]);
        let previous = mean(&self.samples[done - 2 * self.window..done - self.window]);
        current - previous < tol * current.abs()
    }

    pub(crate) fn into_trace(self) -> Vec<(usize, f64)> {
        self.trace
    }
}

/// Running sums for the tail average of the iterates.
///
/// Early stops only happen when a stopping window closes, so the current block
/// then holds exactly the last `window` iterates. A fit that runs to `max_iters`
/// averages its final `max(window, max_iters / 4)` iterates.
pub(crate) struct TailAverage {
    window: usize,
    tail_start: usize,
    block: Vec<f64>,
    block_n: usize,
    tail: Vec<f64>,
    tail_n: usize,
}

impl TailAverage {
    pub(crate) fn new(config: &FitConfig, n: usize) -> Self {
        Self {
            window: config.stop_window,
            tail_start: config.max_iters.saturating_sub(config.stop_window.max(config.max_iters / 4)),
            block: vec![0.0; n],
            block_n: 0,
            tail: vec![0.0; n],
            tail_n: 0,
        }
    }

    pub(crate) fn push(&mut self, t: usize, values: &[f64]) {
        if t.is_multiple_of(self.window) {
            self.block.iter_mut().for_each(|x| *x = 0.0);
            self.block_n = 0;
        }
        self.block.iter_mut().zip(values).for_each(|(a, v)| *a += v);
        self.block_n += 1;
        if t >= self.tail_start {
            self.tail.iter_mut().zip(values).for_each(|(a, v)| *a += v);
            self.tail_n += 1;
        }
    }

    pub(crate) fn mean(&self, stopped_early: bool) -> Vec<f64> {
        let (sum, n) = if stopped_early { (&self.block, self.block_n) } else { (&self.tail, self.tail_n) };
        sum.iter().map(|x| x / n as f64).collect()
    }
}

/// Number of free entries of an `m x p` loading matrix with zero upper triangle.
pub fn free_loadings(m: usize, p: usize) -> usize {
    (0..p).map(|k| m - k).sum()
}

/// Drives the factor-covariance ascent one iteration at a time.
///
/// Parameters are laid out as `mu`, then the free entries of `B` column by
/// column (rows `k..m` of column `k`), then `d`.
pub struct FactorFitter<'m, M: Model + ?Sized> {
    model: &'m M,
    q: FactorGaussian,
    state: AdadeltaState,
    rng: ChaCha8Rng,
    iteration: usize,
    grad: Vec<f64>,
    delta: Vec<f64>,
}

impl<'m, M: Model + ?Sized> FactorFitter<'m, M> {
    /// Starts from `mu = init_mu` (or 0), `B = 0`, `d = init_d_scale`.
    pub fn new(model: &'m M, config: &FitConfig) -> Result<Self, Error> {
        let m = model.dim();
        config.validate(m)?;
        let q = FactorGaussian::new(config.initial_mu(m), DMatrix::zeros(m, config.p), DVector::repeat(m, config.init_d_scale))?;
        Ok(Self::from_initial(model, q, config.seed))
    }

    /// Warm start from an existing distribution.
    pub fn from_initial(model: &'m M, q: FactorGaussian, seed: u64) -> Self {
        let n = 2 * q.dim() + free_loadings(q.dim(), q.factors());
        Self {
            model,
            q,
            state: AdadeltaState::new(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
            iteration: 0,
            grad: vec![0.0; n],
            delta: vec![0.0; n],
        }
    }

    pub fn current(&self) -> &FactorGaussian {
        &self.q
    }

    pub fn adadelta(&self) -> &AdadeltaState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn into_current(self) -> FactorGaussian {
        self.q
    }

    /// `(mu, free entries of B, |d|)` in the fitter's parameter order.
    fn flat_params(&self, out: &mut Vec<f64>) {
        let q = &self.q;
        out.clear();
        out.extend(q.mu.iter());
        for k in 0..q.factors() {
            out.extend((k..q.dim()).map(|i| q.b[(i, k)]));
        }
        out.extend(q.d.iter().map(|x| x.abs()));
    }

    fn distribution_from_flat(&self, flat: &[f64]) -> FactorGaussian {
        let (m, p) = (self.q.dim(), self.q.factors());
        let mu = DVector::from_column_slice(&flat[..m]);
        let mut b = DMatrix::zeros(m, p);
        let mut idx = m;
        for k in 0..p {
            for i in k..m {
                b[(i, k)] = flat[idx];
                idx += 1;
            }
        }
        let d = DVector::from_fn(m, |i, _| flat[idx + i].max(D_FLOOR));
        FactorGaussian { mu, b, d }
    }

    /// One iteration: draw noise, estimate, take the ADADELTA step, re-impose constraints.
    pub fn step(&mut self) -> Result<GradientSample, Error> {
        let (m, p) = (self.q.dim(), self.q.factors());
        let noise = BaseNoise::draw(&mut self.rng, m, p);
        let sample = sample_gradient(self.model, &self.q, noise)?;

        let mut idx = 0;
        for i in 0..m {
            self.grad[idx] = sample.g_mu[i];
            idx += 1;
        }
        for k in 0..p {
            for i in k..m {
                self.grad[idx] = sample.g_b[(i, k)];
                idx += 1;
            }
        }
        for i in 0..m {
            self.grad[idx] = sample.g_d[i];
            idx += 1;
        }
        self.state.step_into(&self.grad, &mut self.delta);

        let q = &mut self.q;
        let mut idx = 0;
        for i in 0..m {
            q.mu[i] += self.delta[idx];
            idx += 1;
        }
        for k in 0..p {
            for i in k..m {
                q.b[(i, k)] += self.delta[idx];
                idx += 1;
            }
        }
        for i in 0..m {
            let updated = q.d[i] + self.delta[idx];
            q.d[i] = if updated.abs() < D_FLOOR { D_FLOOR.copysign(updated) } else { updated };
            idx += 1;
        }
        self.iteration += 1;
        Ok(sample)
    }
}

/// Fits `N(mu, B B' + D^2)` to `model` by stochastic gradient ascent.
///
/// Deterministic given `config.seed`.
pub fn fit<M: Model + ?Sized>(model: &M, config: &FitConfig) -> Result<FitResult, FitError> {
    let mut fitter = FactorFitter::new(model, config).map_err(FitError::Config)?;
    run(&mut fitter, config)
}

/// As [`fit`], starting from a given distribution instead of the default initialization.
pub fn fit_from<M: Model + ?Sized>(model: &M, initial: FactorGaussian, config: &FitConfig) -> Result<FitResult, FitError> {
    config.validate(model.dim()).map_err(FitError::Config)?;
    check_dim("initial distribution", model.dim(), initial.dim()).map_err(FitError::Config)?;
    let mut fitter = FactorFitter::from_initial(model, initial, config.seed);
    run(&mut fitter, config)
}

fn run<M: Model + ?Sized>(fitter: &mut FactorFitter<'_, M>, config: &FitConfig) -> Result<FitResult, FitError> {
    let start = Instant::now();
    let mut monitor = Monitor::new(config);
    let mut average = config.average_tail.then(|| TailAverage::new(config, fitter.state.len()));
    let mut flat = Vec::with_capacity(fitter.state.len());
    let mut iters_run = 0;
    let mut stopped_early = false;
    for t in 0..config.max_iters {
        let sample =
            fitter.step().map_err(|source| FitError::Estimator { iteration: t, snapshot: Box::new(fitter.current().clone()), source })?;
        iters_run = t + 1;
        if let Some(avg) = average.as_mut() {
            fitter.flat_params(&mut flat);
            avg.push(t, &flat);
        }
        if monitor.record(t, sample.elbo_sample) {
            stopped_early = iters_run < config.max_iters;
            break;
        }
    }
    let q_final = match &average {
        Some(avg) => fitter.distribution_from_flat(&avg.mean(stopped_early)),
        None => fitter.current().clone(),
    };
    Ok(FitResult { q_final, elbo_trace: monitor.into_trace(), iters_run, seed: config.seed, wall_seconds: start.elapsed().as_secs_f64() })
}

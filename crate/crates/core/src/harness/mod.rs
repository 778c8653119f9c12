//! Experiment layer: dataset loading, cross-validation folds, p-sweeps and
//! CSV/manifest output.
//!
//! [`run_experiment`] fits every `(p, fold)` cell of a sweep in parallel and
//! writes, into the output directory:
//!
//! - `elbo_trace_p{P}_fold{F}.csv`: `iteration,smoothed_elbo`
//! - `summary_p{P}_fold{F}.csv`: `coordinate,mean,sd`
//! - `predictions_p{P}_fold{F}.csv`: held-out rows, when there are any
//! - `errors.csv`: training and held-out error rates per cell
//! - `kl_vs_p.csv`: `KL(q_p || q_pmax)` per fold
//! - `manifest.txt`: `key: value` lines with seeds, settings, timings and the
//!   status of every cell
//!
//! Floating-point values are written with 17 significant digits so they parse
//! back to the same `f64`.

mod data;
mod folds;
mod predict;
mod report;
pub mod synthetic;

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

pub use data::{load_csv, load_libsvm, DataSource, Dataset, Subjects};
pub use folds::{cell_seed, complement, mix_seed, stratified_folds};
pub use predict::{classify, error_rate, scores, ModelKind};

use crate::error::Error as CoreError;
use crate::factor_gaussian::{kl_gaussians, FactorGaussian};
use crate::models::{GaussianTarget, Model};
use crate::optimizer::{fit, FitConfig, FitError, FitResult};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path} is empty")]
    Empty { path: PathBuf },

    #[error("{file}: column `{column}` not found in header")]
    MissingColumn { file: String, column: String },

    #[error("{file}:{line}: column `{column}` holds non-numeric value {value:?}")]
    NonNumeric { file: String, line: usize, column: String, value: String },

    #[error("{file}:{line}: expected {expected} fields, found {found}")]
    RaggedRow { file: String, line: usize, expected: usize, found: usize },

    #[error("{file}:{line}: label {value} is not coded 0/1 or -1/+1")]
    BadLabel { file: String, line: usize, value: f64 },

    #[error("{file}:{line}: malformed token {token:?}")]
    MalformedToken { file: String, line: usize, token: String },

    #[error("{file}:{line}: feature index {index} outside 1..={dim}")]
    IndexOutOfRange { file: String, line: usize, index: usize, dim: usize },

    #[error("{file}:{line}: feature index {index} appears twice")]
    DuplicateIndex { file: String, line: usize, index: usize },

    #[error("{file}: need at least 2 rows, found {n}")]
    TooFewRows { file: String, n: usize },

    #[error("{file}: non-finite value at row {row}, column {column}")]
    NonFinite { file: String, row: usize, column: usize },

    #[error("{file}: row {row} has subject {id:?}, which is absent from the training data")]
    UnknownSubject { file: String, row: usize, id: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Model(#[from] CoreError),

    #[error("invalid experiment: {0}")]
    Config(String),
}

/// What the sweep fits.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    /// A classification model on `train`. With a `test` set the experiment
    /// must use a single fold; otherwise folds > 1 cross-validate `train`.
    Classification { model: ModelKind, train: DataSource, test: Option<DataSource> },
    /// A known Gaussian target; folds are independent replicate fits.
    GaussianTarget(FactorGaussian),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub p_list: Vec<usize>,
    /// Number of folds, 1 to 20.
    pub folds: usize,
    pub seed: u64,
    /// Fit settings shared by every cell; `p` and `seed` are set per cell.
    pub fit: FitConfig,
    /// Upper bound on concurrently running cells; 0 uses all cores.
    pub workers: usize,
    pub output_dir: PathBuf,
}

/// Outcome of one `(p, fold)` fit.
#[derive(Debug, Clone)]
pub struct CellReport {
    pub p: usize,
    pub fold: usize,
    pub seed: u64,
    pub wall_seconds: f64,
    pub outcome: std::result::Result<CellFit, String>,
}

#[derive(Debug, Clone)]
pub struct CellFit {
    pub result: FitResult,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
    pub predictions: Vec<Prediction>,
}

/// Held-out prediction; `row` indexes the dataset the row came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub row: usize,
    pub label: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlRow {
    pub p: usize,
    pub fold: usize,
    /// `KL(q_p || q_pmax)`; NaN when either fit failed.
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub p_max: usize,
    pub cells: Vec<CellReport>,
    pub kl: Vec<KlRow>,
    pub wall_seconds: f64,
}

impl ExperimentReport {
    pub fn cell(&self, p: usize, fold: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.p == p && c.fold == fold)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }
}

/// Per-fold data: the model to fit plus rows to score.
struct FoldSetup {
    model: Box<dyn Model>,
    train: Option<Dataset>,
    held_out: Option<(Dataset, Vec<usize>)>,
}

struct Prepared {
    kind: Option<ModelKind>,
    dim: usize,
    folds: Vec<FoldSetup>,
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    match &config.task {
        Task::GaussianTarget(target) => {
            let folds = (0..config.folds)
                .map(|_| {
                    Ok(FoldSetup {
                        model: Box::new(GaussianTarget::from_factor(target.clone())?) as Box<dyn Model>,
                        train: None,
                        held_out: None,
                    })
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            Ok(Prepared { kind: None, dim: target.dim(), folds })
        }
        Task::Classification { model, train, test } => {
            let train_data = train.load()?;
            let test_data = match test {
                Some(src) => {
                    if config.folds != 1 {
                        return Err(HarnessError::Config(format!("a separate test set needs folds = 1, got {}", config.folds)));
                    }
                    let mut t = src.load()?;
                    if t.n_features() != train_data.n_features() {
                        return Err(HarnessError::Config(format!(
                            "test set has {} covariates, training set {}",
                            t.n_features(),
                            train_data.n_features()
                        )));
                    }
                    if *model == ModelKind::Mixed {
                        t = t.align_subjects(&train_data)?;
                    }
                    Some(t)
                }
                None => None,
            };
            let dim = model.dim(&train_data)?;
            let mut folds = Vec::with_capacity(config.folds);
            if config.folds == 1 {
                let held_out = test_data.map(|t| {
                    let rows = (0..t.n_rows()).collect();
                    (t, rows)
                });
                folds.push(FoldSetup { model: model.build(&train_data)?, train: Some(train_data), held_out });
            } else {
                if train_data.n_rows() < config.folds {
                    return Err(HarnessError::Config(format!("{} rows cannot fill {} folds", train_data.n_rows(), config.folds)));
                }
                let parts = stratified_folds(train_data.design().y(), config.folds, config.seed);
                for (f, rows) in parts.iter().enumerate() {
                    let train_rows = complement(&parts, f);
                    let fit_data = train_data.select_rows(&train_rows);
                    let held = train_data.select_rows(rows);
                    folds.push(FoldSetup { model: model.build(&fit_data)?, train: Some(fit_data), held_out: Some((held, rows.clone())) });
                }
            }
            Ok(Prepared { kind: Some(*model), dim, folds })
        }
    }
}

fn validate(config: &ExperimentConfig) -> Result<(), HarnessError> {
    if config.p_list.is_empty() {
        return Err(HarnessError::Config("p_list is empty".into()));
    }
    let mut sorted = config.p_list.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != config.p_list.len() {
        return Err(HarnessError::Config(format!("p_list {:?} repeats a value", config.p_list)));
    }
    if !(1..=20).contains(&config.folds) {
        return Err(HarnessError::Config(format!("folds must be in 1..=20, got {}", config.folds)));
    }
    if let Task::Classification { train, test, .. } = &config.task {
        for src in std::iter::once(train).chain(test) {
            std::fs::metadata(src.path()).map_err(|source| HarnessError::Io { path: src.path().to_path_buf(), source })?;
        }
    }
    Ok(())
}

fn run_cell(prepared: &Prepared, config: &ExperimentConfig, p: usize, fold: usize) -> CellReport {
    let seed = cell_seed(config.seed, p, fold);
    let start = Instant::now();
    let setup = &prepared.folds[fold];
    let fit_config = FitConfig { p, seed, ..config.fit.clone() };
    let outcome = match fit(&setup.model, &fit_config) {
        Ok(result) => score_cell(prepared.kind.as_ref(), setup, result).map_err(|e| e.to_string()),
        Err(FitError::Estimator { iteration, source, .. }) => Err(format!("estimator failed at iteration {iteration}: {source}")),
        Err(FitError::Config(e)) => Err(e.to_string()),
    };
    CellReport { p, fold, seed, wall_seconds: start.elapsed().as_secs_f64(), outcome }
}

fn score_cell(kind: Option<&ModelKind>, setup: &FoldSetup, result: FitResult) -> Result<CellFit, HarnessError> {
    let Some(kind) = kind else {
        return Ok(CellFit { result, train_error: None, test_error: None, predictions: Vec::new() });
    };
    let train_error = setup.train.as_ref().map(|d| error_rate(kind, &result.q_final, d)).transpose()?;
    let (test_error, predictions) = match &setup.held_out {
        Some((data, rows)) => {
            let eta = scores(kind, result.q_final.mu(), data)?;
            let predictions =
                rows.iter().enumerate().map(|(i, &row)| Prediction { row, label: data.design().y()[i], score: eta[i] }).collect();
            (Some(error_rate(kind, &result.q_final, data)?), predictions)
        }
        None => (None, Vec::new()),
    };
    Ok(CellFit { result, train_error, test_error, predictions })
}

/// Runs the sweep and writes its artifacts into `config.output_dir`.
///
/// Configuration and data problems are returned as errors before any fit
/// starts. Failed fits are recorded in the manifest and do not stop the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let start = Instant::now();
    validate(config)?;
    let prepared = prepare(config)?;
    if let Some(&p) = config.p_list.iter().find(|&&p| p > prepared.dim) {
        return Err(HarnessError::Config(format!("p = {p} exceeds the parameter dimension {}", prepared.dim)));
    }
    FitConfig { p: 0, ..config.fit.clone() }.validate(prepared.dim)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|source| HarnessError::Io { path: config.output_dir.clone(), source })?;

    let mut p_list = config.p_list.clone();
    p_list.sort_unstable();
    let p_max = *p_list.last().expect("nonempty");
    let grid: Vec<(usize, usize)> = p_list.iter().flat_map(|&p| (0..config.folds).map(move |f| (p, f))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let cells: Vec<CellReport> = pool.install(|| grid.par_iter().map(|&(p, f)| run_cell(&prepared, config, p, f)).collect());

    let mut kl = Vec::with_capacity(cells.len());
    for c in &cells {
        let reference = cells.iter().find(|r| r.p == p_max && r.fold == c.fold);
        let value = match (&c.outcome, reference.map(|r| &r.outcome)) {
            (Ok(_), _) if c.p == p_max => 0.0,
            (Ok(a), Some(Ok(b))) => kl_gaussians(&a.result.q_final, &b.result.q_final).unwrap_or(f64::NAN),
            _ => f64::NAN,
        };
        kl.push(KlRow { p: c.p, fold: c.fold, kl: value });
    }

    let report = ExperimentReport { output_dir: config.output_dir.clone(), p_max, cells, kl, wall_seconds: start.elapsed().as_secs_f64() };
    report::write_all(config, &report)?;
    Ok(report)
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use factorvi::baseline_full::{compare_summaries, fit_full};
use factorvi::harness::synthetic::{factor_target, grouped_data, logistic_data, sparse_signal_data};
use factorvi::harness::{run_experiment, DataSource, ExperimentConfig, ExperimentReport, ModelKind, Task};
use factorvi::models::GaussianTarget;
use factorvi::{fit, FitConfig, Model};

#[derive(Parser)]
#[command(name = "factorvi", version, about = "Factor-covariance Gaussian variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a single approximation with `p` factors and write its trace and summary.
    Fit {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 3)]
        p: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Sweep over factor counts and folds.
    Experiment {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Comma-separated factor counts, e.g. `0,1,2,4`.
        #[arg(long, value_delimiter = ',', required = true)]
        p_list: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        seed: u64,
        /// Concurrent cells; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Fit the factor approximation and the full-Cholesky baseline and compare their marginals.
    Compare {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 3)]
        p: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// KL divergence from each fit with p = 0..=p_max to the fit with p_max.
    KlCurve {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 20)]
        p_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Write a synthetic classification dataset as CSV.
    Simulate {
        #[arg(long, value_enum)]
        kind: SimKind,
        /// Rows, or subjects for `grouped`.
        #[arg(long)]
        n: usize,
        /// Covariates, excluding the intercept.
        #[arg(long)]
        m: usize,
        /// Nonzero coefficients for `sparse`.
        #[arg(long, default_value_t = 5)]
        signals: usize,
        /// Rows per subject for `grouped`.
        #[arg(long, default_value_t = 4)]
        per_subject: usize,
        /// Random-intercept standard deviation for `grouped`.
        #[arg(long, default_value_t = 1.0)]
        sd_u: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SimKind {
    Logistic,
    Sparse,
    Grouped,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModelArg {
    Logistic,
    Horseshoe,
    Mixed,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Csv,
    Libsvm,
}

/// Either a dataset or a synthetic Gaussian target.
#[derive(Args)]
struct TaskArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Logistic)]
    model: ModelArg,
    /// Prior variance of the logistic coefficients.
    #[arg(long, default_value_t = 10.0)]
    prior_var: f64,
    #[arg(long, conflicts_with = "target_dim")]
    train: Option<PathBuf>,
    /// Held-out set scored with the model fitted on all of `--train`.
    #[arg(long, requires = "train")]
    test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long)]
    subject_column: Option<String>,
    /// Number of features in libsvm input.
    #[arg(long)]
    dim: Option<usize>,
    /// Dimension of a synthetic Gaussian target with factor covariance.
    #[arg(long)]
    target_dim: Option<usize>,
    #[arg(long, default_value_t = 4)]
    target_factors: usize,
    #[arg(long, default_value_t = 0)]
    target_seed: u64,
}

impl TaskArgs {
    fn source(&self, path: &Path) -> Result<DataSource> {
        Ok(match self.format {
            Format::Csv => DataSource::Csv {
                path: path.to_path_buf(),
                label_column: self.label_column.clone(),
                subject_column: self.subject_column.clone(),
            },
            Format::Libsvm => DataSource::Libsvm { path: path.to_path_buf(), dim: self.dim.context("--dim is required for libsvm input")? },
        })
    }

    fn model_kind(&self) -> ModelKind {
        match self.model {
            ModelArg::Logistic => ModelKind::Logistic { prior_var: self.prior_var },
            ModelArg::Horseshoe => ModelKind::Horseshoe,
            ModelArg::Mixed => ModelKind::Mixed,
        }
    }

    fn task(&self) -> Result<Task> {
        if let Some(m) = self.target_dim {
            if self.target_factors > m {
                bail!("--target-factors {} exceeds --target-dim {m}", self.target_factors);
            }
            return Ok(Task::GaussianTarget(factor_target(m, self.target_factors, self.target_seed)));
        }
        let train = self.train.as_ref().context("either --train or --target-dim is required")?;
        if self.model == ModelArg::Mixed && self.subject_column.is_none() {
            bail!("--model mixed needs --subject-column");
        }
        let test = self.test.as_ref().map(|t| self.source(t)).transpose()?;
        Ok(Task::Classification { model: self.model_kind(), train: self.source(train)?, test })
    }

    fn model(&self) -> Result<Box<dyn Model>> {
        Ok(match self.task()? {
            Task::GaussianTarget(t) => Box::new(GaussianTarget::from_factor(t)?),
            Task::Classification { model, train, .. } => model.build(&train.load()?)?,
        })
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 0.1)]
    init_d_scale: f64,
    #[arg(long, default_value_t = 1000)]
    stop_window: usize,
    /// Relative improvement of the windowed lower bound below which fitting stops.
    #[arg(long, default_value_t = 1e-4)]
    stop_tol: f64,
    /// Run all `--max-iters` iterations.
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long, default_value_t = 10)]
    trace_every: usize,
    /// Report the last iterate instead of the tail average.
    #[arg(long)]
    last_iterate: bool,
}

impl FitArgs {
    fn config(&self, p: usize, seed: u64) -> FitConfig {
        FitConfig {
            p,
            max_iters: self.max_iters,
            seed,
            init_mu: None,
            init_d_scale: self.init_d_scale,
            stop_window: self.stop_window,
            stop_tol: (!self.no_early_stop).then_some(self.stop_tol),
            trace_every: self.trace_every,
            average_tail: !self.last_iterate,
        }
    }
}

fn print_cells(report: &ExperimentReport) {
    println!("p\tfold\titers\ttrain_error\ttest_error");
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    for c in &report.cells {
        match &c.outcome {
            Ok(f) => println!("{}\t{}\t{}\t{}\t{}", c.p, c.fold, f.result.iters_run, opt(f.train_error), opt(f.test_error)),
            Err(e) => println!("{}\t{}\tfailed: {e}", c.p, c.fold),
        }
    }
}

fn finish(report: &ExperimentReport) -> ExitCode {
    eprintln!("wrote {} ({:.1} s)", report.output_dir.display(), report.wall_seconds);
    if report.failures() > 0 {
        eprintln!("{} of {} fits failed; see manifest.txt", report.failures(), report.cells.len());
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fit { task, fit, p, seed, output } => {
            let config = ExperimentConfig {
                task: task.task()?,
                p_list: vec![p],
                folds: 1,
                seed,
                fit: fit.config(p, seed),
                workers: 1,
                output_dir: output,
            };
            let report = run_experiment(&config)?;
            print_cells(&report);
            Ok(finish(&report))
        }
        Command::Experiment { task, fit, p_list, folds, seed, workers, output } => {
            let config =
                ExperimentConfig { task: task.task()?, p_list, folds, seed, fit: fit.config(0, seed), workers, output_dir: output };
            let report = run_experiment(&config)?;
            print_cells(&report);
            Ok(finish(&report))
        }
        Command::KlCurve { task, fit, p_max, seed, workers, output } => {
            let config = ExperimentConfig {
                task: task.task()?,
                p_list: (0..=p_max).collect(),
                folds: 1,
                seed,
                fit: fit.config(0, seed),
                workers,
                output_dir: output,
            };
            let report = run_experiment(&config)?;
            println!("p\tkl_to_p{p_max}");
            for row in &report.kl {
                println!("{}\t{:.6}", row.p, row.kl);
            }
            Ok(finish(&report))
        }
        Command::Compare { task, fit: fit_args, p, seed, output } => {
            let model = task.model()?;
            let config = fit_args.config(p, seed);
            let factor = fit(model.as_ref(), &config).map_err(|e| anyhow::anyhow!("factor fit: {e}"))?;
            let full = fit_full(model.as_ref(), &config).map_err(|e| anyhow::anyhow!("full fit: {e}"))?;
            let summary = compare_summaries(&factor.q_final, &full.q_final)?;
            fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
            let mut csv = String::from("coordinate,mean_factor,mean_full,sd_factor,sd_full\n");
            for (i, r) in summary.rows.iter().enumerate() {
                csv.push_str(&format!("{i},{:.16e},{:.16e},{:.16e},{:.16e}\n", r.mean_factor, r.mean_full, r.sd_factor, r.sd_full));
            }
            let path = output.join("compare.csv");
            fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("factor p={p}: {} iterations, {:.2} s", factor.iters_run, factor.wall_seconds);
            println!("full: {} iterations, {:.2} s", full.iters_run, full.wall_seconds);
            println!("max |mean gap| {:.4}", summary.max_abs_mean_gap);
            println!("mean correlation {:.6}", summary.mean_correlation);
            println!("mean sd ratio (factor / full) {:.4}", summary.mean_sd_ratio);
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { kind, n, m, signals, per_subject, sd_u, seed, output } => {
            let data = match kind {
                SimKind::Logistic => logistic_data(n, m, seed).0,
                SimKind::Sparse => {
                    if signals > m {
                        bail!("--signals {signals} exceeds --m {m}");
                    }
                    sparse_signal_data(n, m, signals, seed).0
                }
                SimKind::Grouped => grouped_data(n, per_subject, m, sd_u, seed).0,
            };
            data.write_csv(&output)?;
            eprintln!("wrote {} rows to {}", data.n_rows(), output.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

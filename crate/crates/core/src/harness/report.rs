use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ExperimentConfig, ExperimentReport, HarnessError, Task};
use crate::factor_gaussian::FactorGaussian;

/// 17 significant digits: parses back to the identical `f64`.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub(crate) fn write_trace(path: &Path, trace: &[(usize, f64)]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "smoothed_elbo"])?;
    for &(t, v) in trace {
        w.write_record([t.to_string(), fmt_f64(v)])?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_summary(path: &Path, q: &FactorGaussian) -> Result<(), HarnessError> {
    let sd = q.marginal_variances().map(f64::sqrt);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["coordinate", "mean", "sd"])?;
    for i in 0..q.dim() {
        w.write_record([i.to_string(), fmt_f64(q.mu()[i]), fmt_f64(sd[i])])?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn manifest(config: &ExperimentConfig, report: &ExperimentReport) -> String {
    let mut m = String::new();
    let fc = &config.fit;
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(m, "{k}: {v}");
    };
    kv("tool", format!("factorvi {}", env!("CARGO_PKG_VERSION")));
    match &config.task {
        Task::GaussianTarget(t) => {
            kv("task", "gaussian-target".into());
            kv("target_dim", t.dim().to_string());
            kv("target_factors", t.factors().to_string());
        }
        Task::Classification { model, train, test } => {
            kv("task", model.name().into());
            if let super::ModelKind::Logistic { prior_var } = model {
                kv("prior_var", prior_var.to_string());
            }
            kv("train", train.path().display().to_string());
            if let Some(t) = test {
                kv("test", t.path().display().to_string());
            }
        }
    }
    kv("seed", config.seed.to_string());
    kv("p_list", config.p_list.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","));
    kv("folds", config.folds.to_string());
    kv("workers", config.workers.to_string());
    kv("max_iters", fc.max_iters.to_string());
    kv("trace_every", fc.trace_every.to_string());
    kv("stop_window", fc.stop_window.to_string());
    kv("stop_tol", fc.stop_tol.map(|t| t.to_string()).unwrap_or_else(|| "none".into()));
    kv("init_d_scale", fc.init_d_scale.to_string());
    kv("average_tail", fc.average_tail.to_string());
    kv("cells", report.cells.len().to_string());
    kv("cells_failed", report.failures().to_string());
    kv("wall_seconds", format!("{:.3}", report.wall_seconds));
    for c in &report.cells {
        let key = format!("cell.p{}.fold{}", c.p, c.fold);
        let status = match &c.outcome {
            Ok(fit) => format!("ok seed={} iters={} wall_seconds={:.3}", c.seed, fit.result.iters_run, c.wall_seconds),
            Err(msg) => format!("failed seed={} wall_seconds={:.3} error={msg}", c.seed, c.wall_seconds),
        };
        kv(&key, status);
    }
    m
}

/// Writes every artifact of a finished sweep from the calling thread.
pub(crate) fn write_all(config: &ExperimentConfig, report: &ExperimentReport) -> Result<(), HarnessError> {
    let dir = &config.output_dir;
    let mut errors = csv::Writer::from_path(dir.join("errors.csv"))?;
    errors.write_record(["p", "fold", "train_error", "test_error"])?;
    for c in &report.cells {
        let Ok(fit) = &c.outcome else { continue };
        let tag = format!("p{}_fold{}", c.p, c.fold);
        write_trace(&dir.join(format!("elbo_trace_{tag}.csv")), &fit.result.elbo_trace)?;
        write_summary(&dir.join(format!("summary_{tag}.csv")), &fit.result.q_final)?;
        if !fit.predictions.is_empty() {
            let mut w = csv::Writer::from_path(dir.join(format!("predictions_{tag}.csv")))?;
            w.write_record(["row", "label", "score", "predicted"])?;
            for pr in &fit.predictions {
                w.write_record([pr.row.to_string(), pr.label.to_string(), fmt_f64(pr.score), super::classify(pr.score).to_string()])?;
            }
            w.flush().map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
        }
        if fit.train_error.is_some() || fit.test_error.is_some() {
            errors.write_record([c.p.to_string(), c.fold.to_string(), opt_f64(fit.train_error), opt_f64(fit.test_error)])?;
        }
    }
    errors.flush().map_err(|source| HarnessError::Io { path: dir.clone(), source })?;

    let mut kl = csv::Writer::from_path(dir.join("kl_vs_p.csv"))?;
    kl.write_record(["p", "fold", "kl_to_pmax"])?;
    for row in &report.kl {
        kl.write_record([row.p.to_string(), row.fold.to_string(), fmt_f64(row.kl)])?;
    }
    kl.flush().map_err(|source| HarnessError::Io { path: dir.clone(), source })?;

    let path = dir.join("manifest.txt");
    fs::write(&path, manifest(config, report)).map_err(|source| HarnessError::Io { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 1e308] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}

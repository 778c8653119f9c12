use nalgebra::DVector;

use super::data::Dataset;
use super::HarnessError;
use crate::error::Error;
use crate::factor_gaussian::FactorGaussian;
use crate::models::{HorseshoeLogisticModel, LogisticModel, MixedLogisticModel, Model};

/// Classification model fitted by the harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// Logistic regression with `N(0, prior_var I)` coefficients.
    Logistic { prior_var: f64 },
    /// Logistic regression with horseshoe shrinkage on the non-intercept coefficients.
    Horseshoe,
    /// Logistic regression with a random intercept per subject.
    Mixed,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Logistic { .. } => "logistic",
            ModelKind::Horseshoe => "horseshoe",
            ModelKind::Mixed => "mixed",
        }
    }

    pub fn build(&self, data: &Dataset) -> Result<Box<dyn Model>, HarnessError> {
        Ok(match *self {
            ModelKind::Logistic { prior_var } => Box::new(LogisticModel::new(data.design().clone(), prior_var)?),
            ModelKind::Horseshoe => Box::new(HorseshoeLogisticModel::new(data.design().clone())),
            ModelKind::Mixed => Box::new(MixedLogisticModel::new(data.grouped()?)),
        })
    }

    /// Parameter dimension of the model on `data`.
    pub fn dim(&self, data: &Dataset) -> Result<usize, HarnessError> {
        let k = data.design().n_cols();
        Ok(match self {
            ModelKind::Logistic { .. } => k,
            ModelKind::Horseshoe => 2 * k,
            ModelKind::Mixed => {
                let s = data.subjects().ok_or_else(|| HarnessError::Config(format!("{} has no subject column", data.provenance())))?;
                k + s.ids.len() + 1
            }
        })
    }
}

/// Linear predictor of every row at the parameter `mu`.
///
/// The horseshoe model uses its coefficient block; the mixed model adds the
/// subject's random intercept.
pub fn scores(kind: &ModelKind, mu: &DVector<f64>, data: &Dataset) -> Result<DVector<f64>, HarnessError> {
    let expected = kind.dim(data)?;
    if mu.len() != expected {
        return Err(Error::DimensionMismatch { what: "parameter for prediction", expected, found: mu.len() }.into());
    }
    let x = data.design().x();
    let beta = mu.rows(0, x.ncols());
    let mut eta = x * beta;
    if let (ModelKind::Mixed, Some(s)) = (kind, data.subjects()) {
        for (r, &subject) in s.index.iter().enumerate() {
            eta[r] += mu[x.ncols() + subject];
        }
    }
    Ok(eta)
}

/// `+1` when the score is non-negative, else `-1`.
pub fn classify(score: f64) -> f64 {
    if score >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fraction of rows misclassified by the plug-in rule at the variational mean.
pub fn error_rate(kind: &ModelKind, q: &FactorGaussian, data: &Dataset) -> Result<f64, HarnessError> {
    let eta = scores(kind, q.mu(), data)?;
    let y = data.design().y();
    let wrong = eta.iter().zip(y.iter()).filter(|&(&e, &label)| classify(e) != label).count();
    Ok(wrong as f64 / y.len() as f64)
}

use thiserror::Error;

/// Errors raised by the numerical core (distributions, estimators, models, fits).
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },

    #[error("factor count p = {p} exceeds dimension m = {m}")]
    TooManyFactors { m: usize, p: usize },

    #[error("factor loading B[{row}][{col}] above the diagonal must be zero")]
    UpperTriangleNonZero { row: usize, col: usize },

    #[error("scale entry {index} has magnitude {value:e}, below the floor {floor:e}")]
    ScaleBelowFloor { index: usize, value: f64, floor: f64 },

    #[error("interior {p}x{p} system I + B'D^-2 B is numerically singular")]
    Singular { p: usize },

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("non-finite value in {what} at theta = {theta:?}")]
    NonFinite { what: &'static str, theta: Vec<f64> },

    #[error("label {value} at row {row} is not -1 or +1")]
    InvalidLabel { row: usize, value: f64 },

    #[error("design column 0 must be the all-ones intercept (row {row} has {value})")]
    MissingIntercept { row: usize, value: f64 },

    #[error("subject id {id} at row {row} is outside 0..{n_subjects}")]
    UnknownSubject { row: usize, id: usize, n_subjects: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, found })
    }
}

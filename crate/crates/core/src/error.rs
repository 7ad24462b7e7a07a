use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate AR fit of order {order}: normal equations are singular")]
    DegenerateFit { order: usize },

    #[error("no residuals recorded for sensor {sensor}")]
    EmptyResiduals { sensor: usize },

    #[error("innovation covariance is singular at interval {interval}")]
    SingularInnovation { interval: usize },

    #[error("constrained update did not converge after {iterations} iterations (worst KKT residual {residual:e})")]
    QpNonConvergence { iterations: usize, residual: f64 },

    #[error("non-finite model output while perturbing parameter {parameter}")]
    NonFinite { parameter: usize },

    #[error("invalid coloring: parameters {a} and {b} share color {color} but both affect measurement {row}")]
    InvalidColoring {
        a: usize,
        b: usize,
        color: usize,
        row: usize,
    },

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("demand window incomplete: need {needed} intervals, got {got}")]
    IncompleteDemand { needed: usize, got: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    /// Broad class used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Schema(_) | Error::Parse { .. } | Error::InvalidArgument(_) => ErrorClass::Input,
            Error::QpNonConvergence { .. } => ErrorClass::Convergence,
            Error::Io(_) | Error::Csv(_) | Error::Snapshot(_) => ErrorClass::Io,
            _ => ErrorClass::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
    Convergence,
    Io,
}

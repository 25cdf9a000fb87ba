use thiserror::Error;

use crate::game::GameSolution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed document or parameter block; `key` names the offending entry.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("unknown variant `{variant}` for `{key}`")]
    UnknownVariant { key: String, variant: String },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("non-positive weight: {0}")]
    NonPositiveWeight(String),

    #[error("growth violation: b must grow strictly faster than a (p = {p}, q = {q})")]
    GrowthViolation { p: f64, q: f64 },

    #[error("nonconforming control weight: {0}")]
    NonconformingWeight(String),

    #[error("declared bound violated: {0}")]
    DeclaredBoundViolated(String),

    #[error("integrability declaration rejected: {0}")]
    IntegrabilityMismatch(String),

    #[error("singular jacobian at x = {0:?}")]
    SingularJacobian(Vec<f64>),

    #[error("negative alpha {0}")]
    NegativeAlpha(f64),

    #[error("supremum over alpha is unbounded")]
    UnboundedSup,

    #[error("non-finite state encountered at time {time}")]
    NonFiniteState { time: f64 },

    #[error("no convergence: gap {gap:.3e} at horizon {horizon} (limit {limit})")]
    NoConvergence { horizon: f64, gap: f64, limit: f64 },

    #[error("pair (A, B) is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("not integrable on [0, inf): {0}")]
    NotIntegrable(String),

    #[error("time {s} outside grid span [{start}, {end}]")]
    OutOfGrid { s: f64, start: f64, end: f64 },

    #[error("point {0:?} is outside the constraint set")]
    OutsideDomain(Vec<f64>),

    #[error("unsupported: {0}")]
    UnsupportedVariant(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("no fixed point after {} iterations (last update {:.3e})", .last.iterations, .last.alpha_update_norm)]
    NoFixedPoint { last: Box<GameSolution> },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl ToString) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.to_string(),
        }
    }
}

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("score set must contain at least one score")]
    EmptyScoreSet,
    #[error("scores must be finite and nonnegative, got {0}")]
    InvalidScore(f64),
    #[error("ambiguity radius must be nonnegative, got {0}")]
    InvalidRadius(f64),
    #[error("rho must lie in [0, 1), got {0}")]
    InvalidRho(f64),
    #[error("bisection did not converge after {max_iter} iterations (residual {residual:.3e})")]
    BisectionFailed { max_iter: usize, residual: f64 },
    #[error("quantile level exceeds 1: prediction region is unbounded")]
    InfiniteQuantile,
    #[error("prediction error tensor has no entries")]
    EmptyTensor,
    #[error("sigma table does not cover offset {h}, agent {i}")]
    MissingSigma { h: usize, i: usize },
    #[error("invalid variance schedule: {0}")]
    InvalidSchedule(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("reverse sampling produced a non-finite value (draw {draw}, step {step})")]
    NonFiniteSample { draw: usize, step: usize },
    #[error("nuisance buffer too short: need {need} samples, got {got}")]
    ShortBuffer { need: usize, got: usize },
    #[error("obstacle history too short: need at least 2 samples, got {0}")]
    InsufficientHistory(usize),
    #[error("requested {requested} contexts but only {available} are available")]
    NotEnoughContexts { requested: usize, available: usize },
    #[error("analytic shift bound overflowed: estimate is unbounded")]
    UnboundedShift,
    #[error("objective became non-finite during the solve (iteration {0})")]
    NonFiniteCost(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

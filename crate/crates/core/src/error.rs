use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("Gram matrix is singular or ill-conditioned (condition estimate {condition:e}, limit {limit:e})")]
    IllConditioned { condition: f64, limit: f64 },

    #[error("Monte Carlo accumulation produced a non-finite value after {trials} trials")]
    NonFinite { trials: usize },

    #[error("regime mismatch: {0}")]
    Regime(String),

    #[error("cubic has no real positive root; roots (n units): {roots}")]
    NoPositiveRoot { roots: String },

    #[error("degenerate cubic: {0}")]
    DegenerateCubic(String),

    #[error("no feasible grid point for budget {budget}; skipped n values: {skipped:?}")]
    EmptyGrid { budget: u64, skipped: Vec<u64> },

    #[error("budget {budget} cannot be split over {tasks} tasks with at least one point per split")]
    InfeasibleBudget { budget: u64, tasks: usize },

    #[error("cell (budget {budget}, n {n}, rep {rep}): {source}")]
    Cell {
        budget: u64,
        n: u64,
        rep: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("no repetitions recorded for n = {n}")]
    EmptyCell { n: u64 },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

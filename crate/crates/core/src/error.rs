use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid risk spec: {0}")]
    InvalidRiskSpec(String),

    #[error("entropic value-at-risk is not finite after max-shift normalization")]
    EvarScaling,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("covariance matrix is not positive semidefinite (pivot {pivot} at row {row})")]
    NotPositiveSemidefinite { row: usize, pivot: f64 },

    #[error("binomial discretization requires a univariate model")]
    BinomialOnBasket,

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("invalid stage range t={t}, u={u} for horizon {horizon}")]
    StageBounds { t: usize, u: usize, horizon: usize },

    #[error("enumeration needs {count} configurations, limit is {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },

    #[error("grid [{grid_lo}, {grid_hi}] does not cover reachable states [{lo}, {hi}] at stage {stage}")]
    GridCoverage {
        stage: usize,
        lo: f64,
        hi: f64,
        grid_lo: f64,
        grid_hi: f64,
    },

    #[error("risk spec is not cut-compatible: {0}")]
    NotCutCompatible(String),

    #[error("deterministic upper bound is only available for univariate problems")]
    MultivariateUpperBound,

    #[error("iteration budget must be positive")]
    ZeroIterations,

    #[error("exact tree has {nodes} nodes, limit is {limit}")]
    TreeTooLarge { nodes: u128, limit: u128 },

    #[error("ordering precondition violated at node {node}: low {low} > high {high}")]
    OrderingPrecondition { node: usize, low: f64, high: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::EvarScaling | Error::NotPositiveSemidefinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by panel ingestion, design solving, estimation, and
/// inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("duplicate unit entry: {0}")]
    DuplicateUnit(String),

    #[error("nonpositive population weight for unit {unit}: {value}")]
    NonpositiveWeight { unit: String, value: f64 },

    #[error("missing pre-period outcome for unit {unit} at period {period}")]
    MissingPrePeriodValue { unit: String, period: String },

    #[error("fitting period set is empty")]
    EmptyFittingSet,

    #[error("invalid fitting-period count {t_e}: must satisfy 1 <= T_E <= T0 = {t0}")]
    InvalidFittingCount { t_e: usize, t0: usize },

    #[error("invalid period partition: {0}")]
    InvalidPartition(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid design specification: {0}")]
    InvalidSpec(String),

    #[error("enumeration cap exceeded: {candidates} candidate supports > cap {cap}")]
    EnumerationCapExceeded { candidates: u128, cap: u128 },

    #[error("no treated support satisfies the budget constraint")]
    InfeasibleBudget,

    #[error("empty donor pool: {0}")]
    EmptyDonorPool(String),

    #[error("k-means produced an empty cluster after {restarts} restarts")]
    EmptyClusterAfterConvergence { restarts: usize },

    #[error("missing outcome for unit {unit} at period {period}")]
    MissingOutcome { unit: String, period: String },

    #[error("design solution carries no unit-level control weights")]
    MissingUnitLevelWeights,

    #[error("treated-effect estimator forms disagree: |{a} - {b}| > {tol}")]
    FormMismatch { a: f64, b: f64, tol: f64 },

    #[error("singular regression design (ridge = 0 and rank-deficient predictors)")]
    SingularRegression,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("no blank periods available for placebo inference")]
    NoBlankPeriods,

    #[error("combination count {n_combinations} exceeds the exact-mode cap {cap}")]
    CombinationCapExceeded { n_combinations: u128, cap: u128 },

    #[error("requested sample size {m} exceeds the {population} available combinations")]
    SampleLargerThanPopulation { m: u128, population: u128 },

    #[error("missing upstream artifact: {0}")]
    MissingUpstreamArtifact(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

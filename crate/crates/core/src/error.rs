use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },

    #[error("model is not identifiable: column `{column}` is collinear with earlier columns")]
    NonIdentifiable { column: String },

    #[error("IRLS did not converge after {iterations} iterations: {reason}")]
    NonConvergence { iterations: usize, reason: String },

    #[error("outcome has no variation ({events} events in {n} rows)")]
    NoOutcomeVariation { events: usize, n: usize },

    #[error("invalid prevalence {value} at row {row}: log-link prediction must lie below 1")]
    InvalidPrevalence { row: usize, value: f64 },

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("outcome value {value} at row {row} is not 0 or 1")]
    InvalidOutcome { row: usize, value: String },

    #[error("could not parse `{value}` in column `{column}` at row {row}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("dataset is empty after dropping incomplete rows")]
    EmptyDataset,

    #[error("estimator requires a {expected} fit, got {actual}")]
    WrongFamily { expected: String, actual: String },

    #[error("fit did not converge; refusing to derive estimates from it")]
    UnconvergedFit,

    #[error("reference prevalence {0:e} is too small to divide by")]
    DegenerateDenominator(f64),

    #[error("ratio is infinite or undefined: {0}")]
    UndefinedRatio(String),

    #[error("{failed} of {total} bootstrap replicates failed (limit is 20%)")]
    UnstableBootstrap { failed: usize, total: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

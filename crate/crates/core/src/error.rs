use thiserror::Error;

use crate::estimator::RankReport;

pub type Result<T, E = GiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GiError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': cannot parse {value:?} as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Σ n_z μ̂_z μ̂_zᵀ is rank deficient; the report carries its spectrum.
    #[error("parameters not identifiable: environment means span rank {} < p = {} (eigenvalues {:?})",
        .0.rank, .0.eigenvalues.len(), .0.eigenvalues)]
    Identifiability(RankReport),

    /// Pooled within-environment scatter XᵀX − MᵀM is singular.
    #[error("degenerate covariates: within-environment scatter is rank deficient (min eigenvalue {min_eigenvalue:e}, max {max_eigenvalue:e})")]
    DegenerateCovariates {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    #[error("insufficient test sample: n0 = {n0} must exceed p = {p}")]
    InsufficientTestSample { n0: usize, p: usize },

    #[error("causal ellipsoid condition violated: slack {slack:e} < 0")]
    EllipsoidViolation { slack: f64 },

    #[error("not enough sources: Z = {z} < p = {p}")]
    NotEnoughSources { z: usize, p: usize },

    #[error("source selection infeasible: {0}")]
    SelectionInfeasible(String),

    #[error("input too large: {pairs} distance pairs exceeds limit {limit}")]
    TooManyPairs { pairs: u128, limit: u128 },
}

//! Generative invariance: estimation of a causal parameter and a confounding
//! covariance from multi-source data, and generation of responses in a
//! shifted test environment.

pub mod asymptotics;
pub mod data;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod generator;
pub mod linalg;
pub mod rng;
mod serde_util;
pub mod simulation;

pub use data::{load_csv, read_csv, summarize, CsvSchema, Dataset, EnvironmentSummary};
pub use error::{GiError, Result};
pub use estimator::{fit, fit_ols, GIFit, OlsFit, RankReport, DEFAULT_RANK_TOL};
pub use generator::{build_generator, generate_responses, GeneratorSpec};

//! Closed-form Generative Invariance estimators and the pooled OLS baseline.
//!
//! With `M = H_Z X` the per-environment mean matrix, the empirical risk
//! `‖Y − Xβ − (X − M)K‖²` has normal equations whose solution is
//!
//! ```text
//! β̂     = (MᵀM)⁻¹ MᵀY
//! K̂_opt = (XᵀX − MᵀM)⁻¹ Xᵀ(Y − Xβ̂)
//! K̂     = Xᵀ(Y − Xβ̂) / N
//! ```
//!
//! Both Gram matrices are gated on their spectrum (`λ_min > rank_tol·λ_max`);
//! rank deficiency is reported as an error, never regularized away.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{pooled_within_scatter, summarize, weighted_mean_gram, Dataset, EnvironmentSummary};
use crate::error::{GiError, Result};
use crate::linalg::{spd_solve, trailing_block, trailing_vec, SymSpectrum};
use crate::serde_util;

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Spectrum of `Σ n_z μ̂_z μ̂_zᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    /// `None` when the smallest eigenvalue is not positive.
    pub condition_number: Option<f64>,
    pub rank_tol: f64,
    pub identifiable: bool,
}

pub fn check_identifiability(summaries: &[EnvironmentSummary], rank_tol: f64) -> RankReport {
    let gram = weighted_mean_gram(summaries);
    rank_report(&SymSpectrum::new(&gram), rank_tol)
}

fn rank_report(spec: &SymSpectrum, rank_tol: f64) -> RankReport {
    let cond = spec.condition_number();
    RankReport {
        eigenvalues: spec.values.clone(),
        rank: spec.rank(rank_tol),
        condition_number: cond.is_finite().then_some(cond),
        rank_tol,
        identifiable: spec.is_well_posed(rank_tol),
    }
}

/// Fitted Generative Invariance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GIFit {
    #[serde(with = "serde_util::vector")]
    pub beta_hat: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub k_opt_hat: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub k_hat: DVector<f64>,
    /// Pooled response-noise variance σ̂²_Y.
    pub sigma_y_sq_hat: f64,
    /// `‖Y − Xβ̂‖² / N`, the noise scale of the causal-only generator.
    pub causal_resid_var: f64,
    /// Per-environment `Σ_{i∈z} (y_i − x_iᵀβ̂)² / n_z`.
    pub env_resid_var: Vec<f64>,
    /// `MᵀM`.
    #[serde(with = "serde_util::matrix")]
    pub gram: DMatrix<f64>,
    /// `XᵀX − MᵀM`.
    #[serde(with = "serde_util::matrix")]
    pub scatter: DMatrix<f64>,
    pub summaries: Vec<EnvironmentSummary>,
    pub n_total: usize,
    pub intercept: bool,
    pub covariate_names: Vec<String>,
    pub rank_report: RankReport,
}

impl GIFit {
    pub fn p(&self) -> usize {
        self.beta_hat.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `X − M`, rows centered by their environment mean.
pub fn within_centered(d: &Dataset, summaries: &[EnvironmentSummary]) -> DMatrix<f64> {
    let x = d.x();
    DMatrix::from_fn(d.n(), d.p(), |i, j| x[(i, j)] - summaries[d.env()[i]].mu_hat[j])
}

/// `MᵀY = Σ_z μ̂_z Σ_{i∈z} y_i`.
fn mean_cross_response(d: &Dataset, summaries: &[EnvironmentSummary]) -> DVector<f64> {
    let mut out = DVector::zeros(d.p());
    for s in summaries {
        let y_sum: f64 = d.rows_of(s.env_id).iter().map(|&i| d.y()[i]).sum();
        out.axpy(y_sum, &s.mu_hat, 1.0);
    }
    out
}

pub fn fit(d: &Dataset, rank_tol: f64) -> Result<GIFit> {
    let summaries = summarize(d);
    let p = d.p();
    let n = d.n() as f64;

    let gram = weighted_mean_gram(&summaries);
    let gram_spec = SymSpectrum::new(&gram);
    let report = rank_report(&gram_spec, rank_tol);
    if !report.identifiable {
        return Err(GiError::Identifiability(report));
    }
    let beta_hat = spd_solve(&gram, &gram_spec, &mean_cross_response(d, &summaries));

    let resid = d.y() - d.x() * &beta_hat;
    let x_resid = d.x().transpose() * &resid;

    // An intercept column has zero within-environment variation, so only the
    // remaining block of the scatter can be inverted; K_opt is zero there.
    let scatter = pooled_within_scatter(&summaries);
    let a = d.first_active();
    let mut k_opt_hat = DVector::zeros(p);
    if a < p {
        let block = trailing_block(&scatter, a);
        let block_spec = SymSpectrum::new(&block);
        if !block_spec.is_well_posed(rank_tol) {
            return Err(GiError::DegenerateCovariates {
                min_eigenvalue: block_spec.min(),
                max_eigenvalue: block_spec.max(),
            });
        }
        let solved = spd_solve(&block, &block_spec, &trailing_vec(&x_resid, a));
        k_opt_hat.rows_mut(a, p - a).copy_from(&solved);
    }
    let k_hat = &x_resid / n;

    let sigma_y_sq_hat = estimate_noise_variance(d, &beta_hat, &k_opt_hat, &k_hat);
    let causal_resid_var = resid.norm_squared() / n;
    let env_resid_var = summaries
        .iter()
        .map(|s| d.rows_of(s.env_id).iter().map(|&i| resid[i] * resid[i]).sum::<f64>() / s.n_z as f64)
        .collect();

    Ok(GIFit {
        beta_hat,
        k_opt_hat,
        k_hat,
        sigma_y_sq_hat,
        causal_resid_var,
        env_resid_var,
        gram,
        scatter,
        summaries,
        n_total: d.n(),
        intercept: d.intercept(),
        covariate_names: d.names().to_vec(),
        rank_report: report,
    })
}

/// Pooled σ̂²_Y: mean squared risk residual plus `k_optᵀ k`.
pub fn estimate_noise_variance(d: &Dataset, beta: &DVector<f64>, k_opt: &DVector<f64>, k: &DVector<f64>) -> f64 {
    empirical_risk(d, beta, k_opt) + k_opt.dot(k).max(0.0)
}

/// `‖Y − Xβ − (X − M)K‖² / N`.
pub fn empirical_risk(d: &Dataset, beta: &DVector<f64>, k: &DVector<f64>) -> f64 {
    let summaries = summarize(d);
    let centered = within_centered(d, &summaries);
    let r = d.y() - d.x() * beta - centered * k;
    r.norm_squared() / d.n() as f64
}

pub const PD_TOL: f64 = 1e-12;

/// `σ²_Y − Kᵀ Σ⁻¹ K`; the causal ellipsoid condition holds iff this is positive.
pub fn ellipsoid_slack(k: &DVector<f64>, sigma: &DMatrix<f64>, sigma_y_sq: f64) -> Result<f64> {
    if sigma.nrows() != k.len() || sigma.ncols() != k.len() {
        return Err(GiError::DimensionMismatch(format!(
            "K has length {}, Σ is {}x{}",
            k.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let spec = SymSpectrum::new(sigma);
    if !spec.is_well_posed(PD_TOL) {
        return Err(GiError::SingularCovariance(format!(
            "covariance not positive definite (eigenvalues {:?})",
            spec.values
        )));
    }
    Ok(sigma_y_sq - k.dot(&spd_solve(sigma, &spec, k)))
}

/// Pooled least squares over all environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    #[serde(with = "serde_util::vector")]
    pub beta: DVector<f64>,
    /// Residual variance with denominator N.
    pub resid_var: f64,
}

pub fn fit_ols(d: &Dataset, rank_tol: f64) -> Result<OlsFit> {
    let x = d.x();
    let xtx = x.transpose() * x;
    let spec = SymSpectrum::new(&xtx);
    if !spec.is_well_posed(rank_tol) {
        return Err(GiError::DegenerateCovariates {
            min_eigenvalue: spec.min(),
            max_eigenvalue: spec.max(),
        });
    }
    let beta = spd_solve(&xtx, &spec, &(x.transpose() * d.y()));
    let resid_var = (d.y() - x * &beta).norm_squared() / d.n() as f64;
    Ok(OlsFit { beta, resid_var })
}

//! Test-environment response generators.
//!
//! The Generative Invariance generator is
//!
//! ```text
//! g_K(x, ξ) = Kᵀ Σ₀⁻¹ (x − μ₀) + ξ · sqrt(σ²_Y − Kᵀ Σ₀⁻¹ K)
//! ```
//!
//! with `(μ₀, Σ₀)` the moments of the test covariates, and a synthetic
//! response is `βᵀx + g_K(x, ξ)` for `ξ ~ N(0, 1)`. The two baselines are the
//! causal-only (do-interventional) generator `β̂ᵀx + σ̂_* ξ` and the pooled OLS
//! generator `β̂_OLSᵀx + σ̂ ξ`.
//!
//! An intercept coordinate never enters `(μ₀, Σ₀, K)`: the constant column has
//! zero variance, so only the remaining block of `Σ₀` is inverted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GiError, Result};
use crate::estimator::{GIFit, PD_TOL};
use crate::linalg::{spd_solve, trailing_block, trailing_vec, SymSpectrum};
use crate::rng::{standard_normal, stream_rng};
use crate::serde_util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(with = "serde_util::vector")]
    pub beta: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub k: DVector<f64>,
    pub sigma_y_sq: f64,
    #[serde(with = "serde_util::vector")]
    pub mu0: DVector<f64>,
    #[serde(with = "serde_util::matrix")]
    pub sigma0: DMatrix<f64>,
    /// `max(0, σ²_Y − Kᵀ Σ₀⁻¹ K)`.
    pub radicand: f64,
    /// Radicand before truncation.
    pub raw_radicand: f64,
    pub truncated: bool,
    pub intercept: bool,
    /// `Σ₀⁻¹ K` on the non-intercept block, zero on the intercept coordinate.
    #[serde(with = "serde_util::vector")]
    pub loading: DVector<f64>,
}

impl GeneratorSpec {
    /// Assemble a generator from explicit parameters and test moments.
    pub fn from_moments(
        beta: DVector<f64>,
        k: DVector<f64>,
        sigma_y_sq: f64,
        mu0: DVector<f64>,
        sigma0: DMatrix<f64>,
        intercept: bool,
        strict: bool,
    ) -> Result<Self> {
        let p = beta.len();
        if k.len() != p || mu0.len() != p || sigma0.nrows() != p || sigma0.ncols() != p {
            return Err(GiError::DimensionMismatch(format!(
                "beta {p}, k {}, mu0 {}, sigma0 {}x{}",
                k.len(),
                mu0.len(),
                sigma0.nrows(),
                sigma0.ncols()
            )));
        }
        let a = usize::from(intercept);
        let mut loading = DVector::zeros(p);
        let mut quad = 0.0;
        if a < p {
            let block = trailing_block(&sigma0, a);
            let spec = SymSpectrum::new(&block);
            if !spec.is_well_posed(PD_TOL) {
                return Err(GiError::SingularCovariance(format!(
                    "test covariate covariance not positive definite (eigenvalues {:?})",
                    spec.values
                )));
            }
            let k_active = trailing_vec(&k, a);
            let solved = spd_solve(&block, &spec, &k_active);
            quad = k_active.dot(&solved);
            loading.rows_mut(a, p - a).copy_from(&solved);
        }
        let raw_radicand = sigma_y_sq - quad;
        if strict && raw_radicand < 0.0 {
            return Err(GiError::EllipsoidViolation { slack: raw_radicand });
        }
        Ok(Self {
            beta,
            k,
            sigma_y_sq,
            mu0,
            sigma0,
            radicand: raw_radicand.max(0.0),
            raw_radicand,
            truncated: raw_radicand < 0.0,
            intercept,
            loading,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Column means and covariance (denominator n) of a covariate sample.
pub fn sample_moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut sigma = DMatrix::zeros(x.ncols(), x.ncols());
    for row in x.row_iter() {
        let c = row.transpose() - &mu;
        sigma.ger(1.0, &c, &c, 1.0);
    }
    (mu, sigma / n)
}

/// Plug the fitted `(β̂, K̂, σ̂²_Y)` and the moments of `x_test` into `g_K`.
pub fn build_generator(fit: &GIFit, x_test: &DMatrix<f64>, strict: bool) -> Result<GeneratorSpec> {
    let p = fit.p();
    if x_test.ncols() != p {
        return Err(GiError::DimensionMismatch(format!(
            "test covariates have {} columns, fit has {p}",
            x_test.ncols()
        )));
    }
    let p_active = p - usize::from(fit.intercept);
    let n0 = x_test.nrows();
    if n0 <= p_active {
        return Err(GiError::InsufficientTestSample { n0, p: p_active });
    }
    let (mu0, sigma0) = sample_moments(x_test);
    GeneratorSpec::from_moments(
        fit.beta_hat.clone(),
        fit.k_hat.clone(),
        fit.sigma_y_sq_hat,
        mu0,
        sigma0,
        fit.intercept,
        strict,
    )
}

/// `g_K(x, ξ)` with the plug-in moments held in `spec`.
pub fn g_eval(spec: &GeneratorSpec, x: &DVector<f64>, xi: f64) -> f64 {
    spec.loading.dot(&(x - &spec.mu0)) + xi * spec.radicand.sqrt()
}

/// `ŷ_i = βᵀx_i + g_K(x_i, ξ_i)`, `ξ_i` iid standard normal from `seed`.
pub fn generate_responses(spec: &GeneratorSpec, x_test: &DMatrix<f64>, seed: u64) -> DVector<f64> {
    let mut rng = stream_rng(seed, 0);
    let scale = spec.radicand.sqrt();
    let centered_shift = spec.loading.dot(&spec.mu0);
    DVector::from_iterator(
        x_test.nrows(),
        x_test.row_iter().map(|row| {
            let xi = standard_normal(&mut rng);
            row.dot(&spec.beta.transpose()) + row.dot(&spec.loading.transpose()) - centered_shift + xi * scale
        }),
    )
}

fn linear_plus_noise(beta: &DVector<f64>, noise_var: f64, x: &DMatrix<f64>, seed: u64) -> DVector<f64> {
    let mut rng = stream_rng(seed, 0);
    let scale = noise_var.max(0.0).sqrt();
    DVector::from_iterator(
        x.nrows(),
        x.row_iter().map(|row| row.dot(&beta.transpose()) + standard_normal(&mut rng) * scale),
    )
}

/// Causal-only generator: `β̂ᵀx + σ̂_* ξ` with `σ̂_*² = ‖Y − Xβ̂‖²/N`.
pub fn do_interventional_generator(fit: &GIFit, x_test: &DMatrix<f64>, seed: u64) -> Result<DVector<f64>> {
    check_cols(x_test, fit.p())?;
    Ok(linear_plus_noise(&fit.beta_hat, fit.causal_resid_var, x_test, seed))
}

/// Pooled-OLS generator: `β̂_OLSᵀx + σ̂ ξ`.
pub fn ols_generator(beta_ols: &DVector<f64>, resid_var: f64, x_test: &DMatrix<f64>, seed: u64) -> Result<DVector<f64>> {
    check_cols(x_test, beta_ols.len())?;
    Ok(linear_plus_noise(beta_ols, resid_var, x_test, seed))
}

fn check_cols(x: &DMatrix<f64>, p: usize) -> Result<()> {
    if x.ncols() != p {
        return Err(GiError::DimensionMismatch(format!("test covariates have {} columns, expected {p}", x.ncols())));
    }
    Ok(())
}

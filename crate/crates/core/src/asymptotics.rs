//! Plug-in asymptotic covariance of β̂, the efficiency key and data-source
//! selection.
//!
//! The sandwich is `Φ̂⁻¹ [Σ_z (w_z²/n_z) Ω̂_z] Φ̂⁻¹` with
//! `Φ̂ = (1/N) Σ n_z μ̂_z μ̂_zᵀ` and `w_z = n_z/N`. Two middle terms are offered,
//! see [`OmegaForm`].

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{summarize, Dataset, EnvironmentSummary};
use crate::error::{GiError, Result};
use crate::estimator::{fit, GIFit};
use crate::generator::{build_generator, generate_responses};
use crate::linalg::{spd_inverse, symmetrize, SymSpectrum};
use crate::rng::{derive_seed, stream_rng};
use crate::serde_util;

/// `Φ̂ = (1/N) Σ n_z μ̂_z μ̂_zᵀ`.
pub fn plug_in_phi(summaries: &[EnvironmentSummary]) -> DMatrix<f64> {
    let p = summaries.first().map_or(0, |s| s.mu_hat.len());
    let n: usize = summaries.iter().map(|s| s.n_z).sum();
    let mut phi = DMatrix::zeros(p, p);
    for s in summaries {
        phi.ger(s.n_z as f64 / n as f64, &s.mu_hat, &s.mu_hat, 1.0);
    }
    phi
}

/// `Ω_z = (μᵀβ)² Σ − μᵀβ (K μᵀ + μ Kᵀ) + μ μᵀ σ²`.
pub fn plug_in_omega(summary: &EnvironmentSummary, beta: &DVector<f64>, k: &DVector<f64>, sigma_sq: f64) -> DMatrix<f64> {
    let mu = &summary.mu_hat;
    let mb = mu.dot(beta);
    let mut omega = &summary.sigma_hat * (mb * mb);
    omega.ger(-mb, k, mu, 1.0);
    omega.ger(-mb, mu, k, 1.0);
    omega.ger(sigma_sq, mu, mu, 1.0);
    omega
}

/// `(μᵀβ sqrt(vᵀΣv) − μᵀv σ)²`, the lower bound on `vᵀΩ_z v` in its signed form.
/// It only bounds `vᵀΩ_z v` when `(μᵀβ)(μᵀv) ≥ 0`; see [`omega_lower_bound`].
pub fn omega_bound_signed(summary: &EnvironmentSummary, beta: &DVector<f64>, sigma: f64, v: &DVector<f64>) -> f64 {
    let spread = v.dot(&(&summary.sigma_hat * v)).max(0.0).sqrt();
    (summary.mu_hat.dot(beta) * spread - summary.mu_hat.dot(v) * sigma).powi(2)
}

/// `(|μᵀβ| sqrt(vᵀΣv) − |μᵀv| σ)²`. Under `KᵀΣ⁻¹K < σ²`, `vᵀΩ_z v` strictly
/// exceeds this for every `v ≠ 0` with `μᵀβ · μᵀv ≠ 0`, and is at least it otherwise.
pub fn omega_lower_bound(summary: &EnvironmentSummary, beta: &DVector<f64>, sigma: f64, v: &DVector<f64>) -> f64 {
    let spread = v.dot(&(&summary.sigma_hat * v)).max(0.0).sqrt();
    (summary.mu_hat.dot(beta).abs() * spread - summary.mu_hat.dot(v).abs() * sigma).powi(2)
}

/// Middle term of the sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaForm {
    /// `Ω̂_z = σ̂_z² μ̂_z μ̂_zᵀ` with `σ̂_z²` the mean squared residual
    /// `y − xᵀβ̂` in environment `z`. This is the exact first-order term of
    /// `β̂ − β* = (MᵀM)⁻¹ Σ n_z μ̂_z ε̄_z`.
    #[default]
    Linearized,
    /// [`plug_in_omega`] with the pooled σ̂²_Y and K̂. Its first two terms
    /// come from a linearization of `MᵀM` that omits the matching term of
    /// `MᵀY`, so it overstates the variance whenever `μ_zᵀβ* ≠ 0`.
    Displayed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub form: OmegaForm,
    #[serde(with = "serde_util::matrix")]
    pub phi: DMatrix<f64>,
    #[serde(with = "serde_util::matrix_list")]
    pub omegas: Vec<DMatrix<f64>>,
    /// Covariance of β̂ (already divided by the sample sizes).
    #[serde(with = "serde_util::matrix")]
    pub acov: DMatrix<f64>,
    #[serde(with = "serde_util::vector")]
    pub beta_hat: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub std_errors: DVector<f64>,
    pub level: f64,
    #[serde(with = "serde_util::vector")]
    pub ci_lower: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub ci_upper: DVector<f64>,
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Sandwich `Φ⁻¹ [Σ (w_z²/n_z) Ω_z] Φ⁻¹` from summaries and per-environment middles.
pub fn sandwich(summaries: &[EnvironmentSummary], omegas: &[DMatrix<f64>], rank_tol: f64) -> Result<DMatrix<f64>> {
    let phi = plug_in_phi(summaries);
    let spec = SymSpectrum::new(&phi);
    if !spec.is_well_posed(rank_tol) {
        return Err(GiError::Identifiability(crate::estimator::check_identifiability(summaries, rank_tol)));
    }
    let phi_inv = spd_inverse(&phi, &spec);
    let n: usize = summaries.iter().map(|s| s.n_z).sum();
    let p = phi.nrows();
    let middle = summaries.iter().zip(omegas).fold(DMatrix::zeros(p, p), |acc, (s, o)| {
        let w = s.n_z as f64 / n as f64;
        acc + o * (w * w / s.n_z as f64)
    });
    Ok(symmetrize(&(&phi_inv * middle * &phi_inv)))
}

pub fn asymptotic_covariance(fit: &GIFit, level: f64) -> Result<AsymptoticReport> {
    asymptotic_covariance_with(fit, level, OmegaForm::default())
}

pub fn asymptotic_covariance_with(fit: &GIFit, level: f64, form: OmegaForm) -> Result<AsymptoticReport> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GiError::InvalidData(format!("confidence level {level} not in (0, 1)")));
    }
    let omegas: Vec<DMatrix<f64>> = match form {
        OmegaForm::Linearized => fit
            .summaries
            .iter()
            .zip(&fit.env_resid_var)
            .map(|(s, &v)| &s.mu_hat * s.mu_hat.transpose() * v)
            .collect(),
        OmegaForm::Displayed => fit
            .summaries
            .iter()
            .map(|s| plug_in_omega(s, &fit.beta_hat, &fit.k_hat, fit.sigma_y_sq_hat))
            .collect(),
    };
    let acov = sandwich(&fit.summaries, &omegas, fit.rank_report.rank_tol)?;
    let std_errors = acov.diagonal().map(|v| v.max(0.0).sqrt());
    let zq = normal_quantile(0.5 + level / 2.0);
    let half = &std_errors * zq;
    Ok(AsymptoticReport {
        form,
        phi: plug_in_phi(&fit.summaries),
        omegas,
        ci_lower: &fit.beta_hat - &half,
        ci_upper: &fit.beta_hat + &half,
        beta_hat: fit.beta_hat.clone(),
        std_errors,
        level,
        acov,
    })
}

/// `Q(r) = Σ_z n_z/N² (μ̂_zᵀβ̄ · sqrt(rᵀΣ̂_z r) − μ̂_zᵀr · σ̂)²`.
pub fn efficiency_key(summaries: &[EnvironmentSummary], beta_bar: &DVector<f64>, sigma_hat: f64, r: &DVector<f64>) -> f64 {
    let n: usize = summaries.iter().map(|s| s.n_z).sum();
    let n2 = (n as f64) * (n as f64);
    summaries
        .iter()
        .map(|s| {
            let spread = r.dot(&(&s.sigma_hat * r)).max(0.0).sqrt();
            let t = s.mu_hat.dot(beta_bar) * spread - s.mu_hat.dot(r) * sigma_hat;
            s.n_z as f64 / n2 * t * t
        })
        .sum()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in (i + 1)..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCombo {
    /// Positions into the summaries slice, ascending.
    pub combo: Vec<usize>,
    /// `|det|` of the matrix whose columns are the combo's means.
    pub det_score: f64,
}

/// Score every `subset_size`-combination by `|det[μ̂_a … μ̂_b]|` and keep
/// the best `top_b` (descending; ties in lexicographic order).
pub fn det_prefilter(summaries: &[EnvironmentSummary], subset_size: usize, top_b: usize) -> Result<Vec<ScoredCombo>> {
    let z = summaries.len();
    let p = summaries.first().map_or(0, |s| s.mu_hat.len());
    if subset_size != p {
        return Err(GiError::DimensionMismatch(format!("subset size {subset_size} must equal p = {p}")));
    }
    if z < p {
        return Err(GiError::NotEnoughSources { z, p });
    }
    let mut scored: Vec<ScoredCombo> = combinations(z, p)
        .into_iter()
        .map(|combo| {
            let m = DMatrix::from_fn(p, p, |i, j| summaries[combo[j]].mu_hat[i]);
            ScoredCombo {
                det_score: m.determinant().abs(),
                combo,
            }
        })
        .collect();
    // stable sort keeps lexicographic order among ties
    scored.sort_by(|a, b| b.det_score.total_cmp(&a.det_score));
    scored.truncate(top_b);
    Ok(scored)
}

/// Orthonormal completion of `direction` to a basis of ℝᵖ; returns the
/// `p − 1` complement vectors. The standard basis vector most aligned with
/// the direction is dropped and the rest are orthonormalized in index order.
/// A zero direction falls back to `e₁`.
pub fn orthogonal_complement(direction: &DVector<f64>) -> Vec<DVector<f64>> {
    let p = direction.len();
    let norm = direction.norm();
    let u = if norm > 0.0 && norm.is_finite() {
        direction / norm
    } else {
        let mut e = DVector::zeros(p);
        e[0] = 1.0;
        e
    };
    let drop = (0..p)
        .max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs()).then(b.cmp(&a)))
        .unwrap_or(0);
    let mut basis = vec![u];
    for j in (0..p).filter(|&j| j != drop) {
        let mut v = DVector::zeros(p);
        v[j] = 1.0;
        // two passes of modified Gram–Schmidt
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let n = v.norm();
        basis.push(v / n);
    }
    basis.split_off(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub split_seed: u64,
    pub top_b: usize,
    pub rank_tol: f64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            split_seed: 42,
            top_b: 100,
            rank_tol: crate::estimator::DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCombo {
    /// Environment ids of the dataset, ascending.
    pub combo: Vec<usize>,
    pub labels: Vec<String>,
    pub det_score: f64,
    /// `Q̃_b`; `None` when the combo could not be fitted.
    pub key: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRanking {
    /// Environment ids in the estimation half and the evaluation half.
    pub split: (Vec<usize>, Vec<usize>),
    /// Estimation-half combos whose fits entered β̄.
    pub s1_combos: Vec<Vec<usize>>,
    #[serde(with = "serde_util::vector")]
    pub beta_bar: DVector<f64>,
    pub sigma_hat: f64,
    /// Scored combos by descending key (then det, then ids); unfitted combos last.
    pub ranked: Vec<RankedCombo>,
    pub notes: Vec<String>,
}

/// Total order on environments by content, so the split and every tie-break
/// are independent of how environments happen to be numbered.
fn canonical_order(summaries: &[EnvironmentSummary]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..summaries.len()).collect();
    ids.sort_by(|&a, &b| {
        let (sa, sb) = (&summaries[a], &summaries[b]);
        sa.n_z
            .cmp(&sb.n_z)
            .then_with(|| cmp_slices(sa.mu_hat.as_slice(), sb.mu_hat.as_slice()))
            .then_with(|| cmp_slices(sa.sigma_hat.as_slice(), sb.sigma_hat.as_slice()))
            .then_with(|| sa.label.cmp(&sb.label))
    });
    ids
}

fn cmp_slices(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Fit on the listed environments; identifiability failures become `None`.
fn try_fit(d: &Dataset, combo: &[usize], rank_tol: f64) -> Result<Option<GIFit>> {
    match d.select_envs(combo).and_then(|sub| fit(&sub, rank_tol)) {
        Ok(f) => Ok(Some(f)),
        Err(GiError::Identifiability(_)) | Err(GiError::DegenerateCovariates { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Rank `p`-combinations of held-out sources by their efficiency key.
///
/// Sources are split at random into an estimation half `S1` (size ⌈Z/2⌉) and
/// an evaluation half `S2`. β̄ averages the fits of the best `top_b` S1
/// combos by determinant; σ̂ comes from a fit on all of S1. Each S2 combo
/// `b` (again det-prefiltered) is fitted, `β̂_b − β̄` is completed to an
/// orthonormal basis and `Q̃_b` is the smallest key over the complement.
pub fn select_sources(d: &Dataset, opts: &SelectionOptions) -> Result<EfficiencyRanking> {
    let z = d.n_envs();
    let p = d.p();
    if z < 2 * p {
        return Err(GiError::SelectionInfeasible(format!(
            "need at least 2p = {} sources, have {z}",
            2 * p
        )));
    }
    let summaries = summarize(d);
    let canon = canonical_order(&summaries);
    let mut rank_of = vec![0; z];
    for (r, &id) in canon.iter().enumerate() {
        rank_of[id] = r;
    }

    let mut shuffled = canon.clone();
    shuffled.shuffle(&mut stream_rng(opts.split_seed, 0));
    let half = z.div_ceil(2);
    let by_canon = |mut v: Vec<usize>| {
        v.sort_by_key(|&id| rank_of[id]);
        v
    };
    let s1 = by_canon(shuffled[..half].to_vec());
    let s2 = by_canon(shuffled[half..].to_vec());
    let mut notes = Vec::new();

    let subset = |ids: &[usize]| ids.iter().map(|&i| summaries[i].clone()).collect::<Vec<_>>();
    let to_ids = |ids: &[usize], combo: &[usize]| combo.iter().map(|&c| ids[c]).collect::<Vec<_>>();

    // estimation half
    let s1_candidates: Vec<Vec<usize>> = det_prefilter(&subset(&s1), p, opts.top_b)?
        .into_iter()
        .map(|c| to_ids(&s1, &c.combo))
        .collect();
    let s1_fits = s1_candidates
        .par_iter()
        .map(|c| try_fit(d, c, opts.rank_tol))
        .collect::<Result<Vec<_>>>()?;
    let mut s1_combos = Vec::new();
    let mut beta_sum = DVector::zeros(p);
    for (c, f) in s1_candidates.iter().zip(&s1_fits) {
        match f {
            Some(f) => {
                beta_sum += &f.beta_hat;
                s1_combos.push(c.clone());
            }
            None => notes.push(format!("S1 combo {} not identifiable; skipped", fmt_labels(d, c))),
        }
    }
    if s1_combos.is_empty() {
        return Err(GiError::SelectionInfeasible("no identifiable combination in the estimation half".into()));
    }
    let beta_bar = beta_sum / s1_combos.len() as f64;
    let sigma_hat = match d.select_envs(&s1).and_then(|sub| fit(&sub, opts.rank_tol)) {
        Ok(f) => f.sigma_y_sq_hat.sqrt(),
        Err(e) => {
            return Err(GiError::SelectionInfeasible(format!("aggregate fit on the estimation half failed: {e}")))
        }
    };

    // evaluation half
    let s2_candidates: Vec<(Vec<usize>, f64)> = det_prefilter(&subset(&s2), p, opts.top_b)?
        .into_iter()
        .map(|c| (to_ids(&s2, &c.combo), c.det_score))
        .collect();
    let keys = s2_candidates
        .par_iter()
        .map(|(c, _)| {
            let Some(f) = try_fit(d, c, opts.rank_tol)? else {
                return Ok(None);
            };
            let comp = orthogonal_complement(&(&f.beta_hat - &beta_bar));
            let local = subset(c);
            let key = comp
                .iter()
                .map(|r| efficiency_key(&local, &beta_bar, sigma_hat, r))
                .fold(f64::INFINITY, f64::min);
            // p = 1 leaves an empty complement
            Ok(Some(if key.is_finite() { key } else { 0.0 }))
        })
        .collect::<Result<Vec<Option<f64>>>>()?;
    if keys.iter().all(Option::is_none) {
        return Err(GiError::SelectionInfeasible("no identifiable combination in the evaluation half".into()));
    }

    let mut ranked: Vec<RankedCombo> = s2_candidates
        .into_iter()
        .zip(keys)
        .map(|((mut combo, det_score), key)| {
            if key.is_none() {
                notes.push(format!("S2 combo {} not identifiable; ranked last", fmt_labels(d, &combo)));
            }
            combo.sort_unstable();
            RankedCombo {
                labels: combo.iter().map(|&i| d.labels()[i].clone()).collect(),
                combo,
                det_score,
                key,
            }
        })
        .collect();
    let canon_key = |c: &RankedCombo| {
        let mut r: Vec<usize> = c.combo.iter().map(|&i| rank_of[i]).collect();
        r.sort_unstable();
        r
    };
    ranked.sort_by(|a, b| {
        let by_key = match (a.key, b.key) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        };
        by_key
            .then(b.det_score.total_cmp(&a.det_score))
            .then_with(|| canon_key(a).cmp(&canon_key(b)))
    });

    Ok(EfficiencyRanking {
        split: (s1, s2),
        s1_combos,
        beta_bar,
        sigma_hat,
        ranked,
        notes,
    })
}

fn fmt_labels(d: &Dataset, combo: &[usize]) -> String {
    let names: Vec<&str> = combo.iter().map(|&i| d.labels()[i].as_str()).collect();
    format!("{{{}}}", names.join(","))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub rank_tol: f64,
    pub strict: bool,
    /// Reuse one ξ stream for every combo instead of one stream per combo.
    pub shared_noise: bool,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            rank_tol: crate::estimator::DEFAULT_RANK_TOL,
            strict: false,
            shared_noise: false,
        }
    }
}

/// Seed used for combo `index` by [`aggregate_predictions`].
pub fn combo_seed(seed: u64, index: usize, shared_noise: bool) -> u64 {
    if shared_noise {
        seed
    } else {
        derive_seed(seed, index as u64)
    }
}

/// Average, per test row, the generated responses of one fit per combo.
pub fn aggregate_predictions(
    d: &Dataset,
    combos: &[Vec<usize>],
    x_test: &DMatrix<f64>,
    seed: u64,
    opts: &AggregateOptions,
) -> Result<DVector<f64>> {
    if combos.is_empty() {
        return Err(GiError::InvalidData("no combinations to aggregate".into()));
    }
    let preds = combos
        .par_iter()
        .enumerate()
        .map(|(i, combo)| {
            let f = fit(&d.select_envs(combo)?, opts.rank_tol)?;
            let spec = build_generator(&f, x_test, opts.strict)?;
            Ok(generate_responses(&spec, x_test, combo_seed(seed, i, opts.shared_noise)))
        })
        .collect::<Result<Vec<_>>>()?;
    let sum = preds.iter().fold(DVector::zeros(x_test.nrows()), |acc, p| acc + p);
    Ok(sum / combos.len() as f64)
}

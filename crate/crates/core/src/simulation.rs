//! Seeded data-generating processes: Gaussian multi-environment data with
//! endogenous noise, the univariate shift benchmark and the coverage study.
//!
//! Noise is built from the conditional Gaussian form
//! `ε = KᵀΣ⁻¹(X − μ) + η sqrt(σ² − KᵀΣ⁻¹K)`, so `Cov(X, ε) = K` holds exactly
//! in every environment.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{asymptotic_covariance_with, OmegaForm};
use crate::data::Dataset;
use crate::error::{GiError, Result};
use crate::estimator::{fit, fit_ols, DEFAULT_RANK_TOL, PD_TOL};
use crate::evaluation::{energy_distance, mse};
use crate::generator::{build_generator, do_interventional_generator, g_eval, generate_responses, ols_generator};
use crate::linalg::{psd_sqrt, spd_inverse, SymSpectrum};
use crate::rng::{derive_seed, standard_normal, stream_rng};
use crate::serde_util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Columns of X, including the intercept column when `intercept` is set.
    pub p: usize,
    pub z_envs: usize,
    pub n_per_env: Vec<usize>,
    #[serde(with = "serde_util::vector")]
    pub beta_star: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub k_star: DVector<f64>,
    /// Scale of the entries of `A_z` in `Σ_z = A_zᵀA_z + I`.
    pub s1: f64,
    /// Standard deviation of the entries of `μ_z`.
    pub s2: f64,
    pub intercept: bool,
    pub seed: u64,
}

impl SimulationConfig {
    /// Five columns (intercept plus four covariates), six environments of 200 rows.
    pub fn multienv_preset(seed: u64) -> Self {
        Self {
            p: 5,
            z_envs: 6,
            n_per_env: vec![200; 6],
            beta_star: DVector::from_vec(vec![1.0, 5.0, 12.0, 6.0, 7.0]),
            k_star: DVector::from_vec(vec![0.0, -2.7, 2.1, 1.0, -1.7]),
            s1: 3.0,
            s2: 20.0,
            intercept: true,
            seed,
        }
    }

    /// Two covariates, three environments of 2000 rows, used by the coverage study.
    pub fn coverage_preset(seed: u64) -> Self {
        Self {
            p: 2,
            z_envs: 3,
            n_per_env: vec![2000; 3],
            beta_star: DVector::from_vec(vec![1.0, -2.0]),
            k_star: DVector::from_vec(vec![0.5, 0.3]),
            s1: 1.0,
            s2: 2.0,
            intercept: false,
            seed,
        }
    }

    fn first_active(&self) -> usize {
        usize::from(self.intercept)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GiError::InvalidData(m));
        if self.p == 0 || self.p <= self.first_active() {
            return bad(format!("p = {} leaves no covariates", self.p));
        }
        if self.z_envs == 0 || self.n_per_env.len() != self.z_envs {
            return bad(format!("{} sample sizes for {} environments", self.n_per_env.len(), self.z_envs));
        }
        if self.n_per_env.contains(&0) {
            return bad("empty environment".into());
        }
        if self.beta_star.len() != self.p || self.k_star.len() != self.p {
            return bad(format!("beta_star and k_star must have length {}", self.p));
        }
        if self.intercept && self.k_star[0] != 0.0 {
            return bad("k_star must be 0 on the intercept coordinate".into());
        }
        if !(self.s1 >= 0.0 && self.s2 >= 0.0 && self.s1.is_finite() && self.s2.is_finite()) {
            return bad("s1 and s2 must be finite and nonnegative".into());
        }
        if self.beta_star.iter().chain(self.k_star.iter()).any(|v| !v.is_finite()) {
            return bad("non-finite beta_star or k_star".into());
        }
        Ok(())
    }
}

/// Covariate law of one environment, on the non-intercept columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentLaw {
    #[serde(with = "serde_util::vector")]
    pub mu: DVector<f64>,
    #[serde(with = "serde_util::matrix")]
    pub sigma: DMatrix<f64>,
    /// `σ²_z = KᵀΣ_z⁻¹K + 1`.
    pub noise_var: f64,
}

impl EnvironmentLaw {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, k_active: &DVector<f64>, slack: f64) -> Result<Self> {
        let spec = SymSpectrum::new(&sigma);
        if spec.min() <= PD_TOL * spec.max().max(1.0) {
            return Err(GiError::SingularCovariance(format!("environment covariance has min eigenvalue {:e}", spec.min())));
        }
        let q = k_active.dot(&(spd_inverse(&sigma, &spec) * k_active));
        Ok(Self {
            mu,
            sigma,
            noise_var: q + slack,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(with = "serde_util::vector")]
    pub beta_star: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub k_star: DVector<f64>,
    pub laws: Vec<EnvironmentLaw>,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

/// Draw `(μ_z, Σ_z)` for `z_envs` environments: `Σ_z = AᵀA + I` with
/// `A_ij ~ N(0, s1²)` and `μ_z,j ~ N(0, s2²)`.
pub fn draw_laws<R: Rng + ?Sized>(q: usize, z_envs: usize, s1: f64, s2: f64, k_active: &DVector<f64>, rng: &mut R) -> Result<Vec<EnvironmentLaw>> {
    (0..z_envs)
        .map(|_| {
            let a = DMatrix::from_fn(q, q, |_, _| s1 * standard_normal(rng));
            let sigma = a.transpose() * &a + DMatrix::identity(q, q);
            let mu = DVector::from_fn(q, |_, _| s2 * standard_normal(rng));
            EnvironmentLaw::new(mu, sigma, k_active, 1.0)
        })
        .collect()
}

/// `n` rows of `(X, Y)` from one environment law. Returns the full design
/// (with a leading column of ones when `intercept`) and the responses.
pub fn sample_environment<R: Rng + ?Sized>(
    law: &EnvironmentLaw,
    beta: &DVector<f64>,
    k: &DVector<f64>,
    intercept: bool,
    n: usize,
    rng: &mut R,
) -> (DMatrix<f64>, DVector<f64>) {
    let off = usize::from(intercept);
    let q = law.mu.len();
    let root = psd_sqrt(&law.sigma);
    let spec = SymSpectrum::new(&law.sigma);
    let k_act = k.rows(off, q).into_owned();
    let loading = crate::linalg::spd_solve(&law.sigma, &spec, &k_act);
    let resid_sd = (law.noise_var - k_act.dot(&loading)).max(0.0).sqrt();
    let mut x = DMatrix::zeros(n, q + off);
    let mut y = DVector::zeros(n);
    let mut g = DVector::zeros(q);
    for i in 0..n {
        g.iter_mut().for_each(|v| *v = standard_normal(rng));
        let dev = &root * &g;
        let eps = loading.dot(&dev) + resid_sd * standard_normal(rng);
        if intercept {
            x[(i, 0)] = 1.0;
        }
        for j in 0..q {
            x[(i, off + j)] = law.mu[j] + dev[j];
        }
        y[i] = x.row(i).transpose().dot(beta) + eps;
    }
    (x, y)
}

/// Sample a dataset from fixed laws, environment by environment.
pub fn sample_from_laws(cfg: &SimulationConfig, laws: &[EnvironmentLaw], seed: u64) -> Result<Dataset> {
    let mut rng = stream_rng(seed, 1);
    let n: usize = cfg.n_per_env.iter().sum();
    let mut x = DMatrix::zeros(n, cfg.p);
    let mut y = DVector::zeros(n);
    let mut env = Vec::with_capacity(n);
    let mut row = 0;
    for (z, (law, &nz)) in laws.iter().zip(&cfg.n_per_env).enumerate() {
        let (xz, yz) = sample_environment(law, &cfg.beta_star, &cfg.k_star, cfg.intercept, nz, &mut rng);
        x.rows_mut(row, nz).copy_from(&xz);
        y.rows_mut(row, nz).copy_from(&yz);
        env.extend(std::iter::repeat_n(z, nz));
        row += nz;
    }
    let d = Dataset::new(x, y, env)?;
    if cfg.intercept {
        let names = std::iter::once(crate::data::INTERCEPT_NAME.to_string())
            .chain((1..cfg.p).map(|j| format!("x{j}")))
            .collect();
        Dataset::from_parts(d.x().clone(), d.y().clone(), d.env().to_vec(), d.labels().to_vec(), names, true)
    } else {
        Ok(d)
    }
}

/// Draw environment laws and a dataset. Deterministic in `cfg.seed`.
pub fn simulate_multienv(cfg: &SimulationConfig) -> Result<Simulated> {
    cfg.validate()?;
    let q = cfg.p - cfg.first_active();
    let k_act = cfg.k_star.rows(cfg.first_active(), q).into_owned();
    let laws = draw_laws(q, cfg.z_envs, cfg.s1, cfg.s2, &k_act, &mut stream_rng(cfg.seed, 0))?;
    let dataset = sample_from_laws(cfg, &laws, cfg.seed)?;
    Ok(Simulated {
        dataset,
        truth: GroundTruth {
            beta_star: cfg.beta_star.clone(),
            k_star: cfg.k_star.clone(),
            laws,
        },
    })
}

/// Univariate training/test pair for the intervention-strength benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateShift {
    pub n_train: usize,
    pub n_test: usize,
    pub beta_star: f64,
    pub k_star: f64,
    pub sigma_y_sq: f64,
    /// Mean and variance of the Gaussian perturbation added to `ε_X ~ N(0, 1)` in training.
    pub train_shift_mean: f64,
    pub train_shift_var: f64,
}

impl Default for UnivariateShift {
    fn default() -> Self {
        Self {
            n_train: 300,
            n_test: 300,
            beta_star: 1.0,
            k_star: 1.0,
            sigma_y_sq: 2.0,
            train_shift_mean: 1.0,
            train_shift_var: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShiftSample {
    pub train: Dataset,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    /// Variance and mean of the test perturbation.
    pub shift_var: f64,
    pub shift_mean: f64,
}

/// `n` draws of `X = ε_X + V`, `V ~ N(m, v)`, and `ε` with `Cov(X, ε) = K`.
fn shift_draws<R: Rng + ?Sized>(cfg: &UnivariateShift, n: usize, m: f64, v: f64, rng: &mut R) -> (DMatrix<f64>, DVector<f64>) {
    let var_x = 1.0 + v;
    let load = cfg.k_star / var_x;
    let resid_sd = (cfg.sigma_y_sq - cfg.k_star * load).max(0.0).sqrt();
    let mut x = DMatrix::zeros(n, 1);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let xi = standard_normal(rng) + m + v.sqrt() * standard_normal(rng);
        let eps = load * (xi - m) + resid_sd * standard_normal(rng);
        x[(i, 0)] = xi;
        y[i] = cfg.beta_star * xi + eps;
    }
    (x, y)
}

fn shift_train(cfg: &UnivariateShift, seed: u64) -> Result<Dataset> {
    let mut rng = stream_rng(seed, 0);
    let (x, y) = shift_draws(cfg, cfg.n_train, cfg.train_shift_mean, cfg.train_shift_var, &mut rng);
    Dataset::new(x, y, vec![0; cfg.n_train])
}

/// Test perturbation of strength `s = E V²`: `Var V ~ U(0, s)`, `(E V)² = s − Var V`.
fn shift_test(cfg: &UnivariateShift, s: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>, f64, f64) {
    let mut rng = stream_rng(seed, 1);
    let v = if s > 0.0 { rng.random_range(0.0..s) } else { 0.0 };
    let m = (s - v).max(0.0).sqrt();
    let (x, y) = shift_draws(cfg, cfg.n_test, m, v, &mut rng);
    (x, y, v, m)
}

/// Training data (one environment) and a test sample under strength `s`.
pub fn simulate_univariate_shift(cfg: &UnivariateShift, s: f64, seed: u64) -> Result<ShiftSample> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(GiError::InvalidData(format!("intervention strength {s} must be finite and nonnegative")));
    }
    let train = shift_train(cfg, seed)?;
    let (x_test, y_test, shift_var, shift_mean) = shift_test(cfg, s, seed);
    Ok(ShiftSample {
        train,
        x_test,
        y_test,
        shift_var,
        shift_mean,
    })
}

/// Perturbation draws `V` of strength `s` (used to check `E V² = s`).
pub fn draw_perturbations(s: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 2);
    (0..n)
        .map(|_| {
            let v = if s > 0.0 { rng.random_range(0.0..s) } else { 0.0 };
            (s - v).max(0.0).sqrt() + v.sqrt() * standard_normal(&mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    Energy,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub metric: SweepMetric,
    pub grid: Vec<f64>,
    pub gi: Vec<f64>,
    pub ols: Vec<f64>,
    pub causal: Vec<f64>,
    pub replicates: usize,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["s", "log10_s", "gi", "ols", "causal", "log10_gi", "log10_ols", "log10_causal"])?;
        for i in 0..self.grid.len() {
            let vals = [self.grid[i], self.gi[i], self.ols[i], self.causal[i]];
            let mut rec: Vec<String> = vec![fmt(vals[0]), fmt(vals[0].log10())];
            rec.extend(vals[1..].iter().map(|&v| fmt(v)));
            rec.extend(vals[1..].iter().map(|&v| fmt(v.log10())));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    /// Redraw the training sample for every replicate instead of fixing one draw.
    pub refit_per_replicate: bool,
    /// Fit the OLS baseline with an intercept column.
    pub ols_intercept: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            refit_per_replicate: false,
            ols_intercept: true,
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(GiError::InvalidData("grid must be nonempty, finite, nonnegative and strictly increasing".into()));
    }
    Ok(())
}

fn joint(x: &DMatrix<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    let mut m = x.clone().insert_column(x.ncols(), 0.0);
    m.set_column(x.ncols(), y);
    m
}

/// Energy distance between the true test sample `(x, y)` and `(x, ŷ)` for
/// the GI, OLS and causal-only generators, averaged over replicates.
pub fn energy_benchmark(cfg: &UnivariateShift, grid: &[f64], replicates: usize, seed: u64, opts: &BenchmarkOptions) -> Result<SweepResult> {
    check_grid(grid)?;
    if replicates == 0 {
        return Err(GiError::InvalidData("replicates must be positive".into()));
    }
    let fixed_train = shift_train(cfg, seed)?;
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..replicates).map(move |r| (g, r))).collect();
    let scores = jobs
        .par_iter()
        .map(|&(g, r)| {
            let rep_seed = derive_seed(seed, (g * replicates + r) as u64 + 1);
            let train = if opts.refit_per_replicate { shift_train(cfg, rep_seed)? } else { fixed_train.clone() };
            let gi_fit = fit(&train, DEFAULT_RANK_TOL)?;
            let ols_train = if opts.ols_intercept { train.clone().with_intercept()? } else { train.clone() };
            let ols = fit_ols(&ols_train, DEFAULT_RANK_TOL)?;
            let (x, y, _, _) = shift_test(cfg, grid[g], rep_seed);
            let truth = joint(&x, &y);
            let gen_seed = derive_seed(rep_seed, 0);
            let spec = build_generator(&gi_fit, &x, false)?;
            let y_gi = generate_responses(&spec, &x, gen_seed);
            let x_ols = if opts.ols_intercept { x.clone().insert_column(0, 1.0) } else { x.clone() };
            let y_ols = ols_generator(&ols.beta, ols.resid_var, &x_ols, gen_seed)?;
            let y_causal = do_interventional_generator(&gi_fit, &x, gen_seed)?;
            Ok([
                energy_distance(&truth, &joint(&x, &y_gi))?.value,
                energy_distance(&truth, &joint(&x, &y_ols))?.value,
                energy_distance(&truth, &joint(&x, &y_causal))?.value,
            ])
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    Ok(average_sweep(SweepMetric::Energy, grid, replicates, &scores))
}

fn average_sweep(metric: SweepMetric, grid: &[f64], replicates: usize, scores: &[[f64; 3]]) -> SweepResult {
    let mut acc = vec![[0.0; 3]; grid.len()];
    for (i, s) in scores.iter().enumerate() {
        for m in 0..3 {
            acc[i / replicates][m] += s[m] / replicates as f64;
        }
    }
    SweepResult {
        metric,
        grid: grid.to_vec(),
        gi: acc.iter().map(|a| a[0]).collect(),
        ols: acc.iter().map(|a| a[1]).collect(),
        causal: acc.iter().map(|a| a[2]).collect(),
        replicates,
    }
}

/// Test MSE against perturbation strength on multi-environment data.
///
/// Each replicate fits on a fresh training draw from `cfg`, then draws a test
/// environment with `s1 ~ U(0, S)`, `s2 = S − s1`. Point predictions are the
/// GI generator at `ξ = 0`, `β̂_OLSᵀx` and `β̂ᵀx`.
pub fn mse_benchmark(cfg: &SimulationConfig, grid: &[f64], replicates: usize, n_test: usize) -> Result<SweepResult> {
    check_grid(grid)?;
    cfg.validate()?;
    if replicates == 0 || n_test == 0 {
        return Err(GiError::InvalidData("replicates and n_test must be positive".into()));
    }
    let off = cfg.first_active();
    let q = cfg.p - off;
    let k_act = cfg.k_star.rows(off, q).into_owned();
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..replicates).map(move |r| (g, r))).collect();
    let scores = jobs
        .par_iter()
        .map(|&(g, r)| {
            let train_cfg = SimulationConfig {
                seed: derive_seed(cfg.seed, r as u64),
                ..cfg.clone()
            };
            let train = simulate_multienv(&train_cfg)?.dataset;
            let gi_fit = fit(&train, DEFAULT_RANK_TOL)?;
            let ols = fit_ols(&train, DEFAULT_RANK_TOL)?;
            let mut rng = stream_rng(derive_seed(cfg.seed, (g * replicates + r) as u64 + 1 + replicates as u64), 3);
            let big_s = grid[g];
            let s1 = if big_s > 0.0 { rng.random_range(0.0..big_s) } else { 0.0 };
            let law = draw_laws(q, 1, s1, big_s - s1, &k_act, &mut rng)?.remove(0);
            let (x, y) = sample_environment(&law, &cfg.beta_star, &cfg.k_star, cfg.intercept, n_test, &mut rng);
            let spec = build_generator(&gi_fit, &x, false)?;
            let pred_gi = DVector::from_fn(n_test, |i, _| g_eval(&spec, &x.row(i).transpose(), 0.0));
            Ok([mse(&pred_gi, &y)?, mse(&(&x * &ols.beta), &y)?, mse(&(&x * &gi_fit.beta_hat), &y)?])
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    Ok(average_sweep(SweepMetric::Mse, grid, replicates, &scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub replicates: usize,
    pub level: f64,
    pub form: OmegaForm,
    /// Fraction of replicates whose interval covers each β*_j.
    pub coverage: Vec<f64>,
    /// Average plug-in covariance of β̂.
    #[serde(with = "serde_util::matrix")]
    pub mean_acov: DMatrix<f64>,
    /// Monte Carlo covariance of β̂ across replicates.
    #[serde(with = "serde_util::matrix")]
    pub mc_cov: DMatrix<f64>,
    /// `‖mean_acov − mc_cov‖_F / ‖mc_cov‖_F`.
    pub rel_frobenius: f64,
    pub mean_width: Vec<f64>,
    pub laws: Vec<EnvironmentLaw>,
}

impl CoverageResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["coordinate", "coverage", "mean_width", "acov_diag", "mc_var"])?;
        for j in 0..self.coverage.len() {
            out.write_record([
                j.to_string(),
                fmt(self.coverage[j]),
                fmt(self.mean_width[j]),
                fmt(self.mean_acov[(j, j)]),
                fmt(self.mc_cov[(j, j)]),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Condition number cap for `Σ n_z μ_z μ_zᵀ` when drawing coverage laws.
pub const COVERAGE_MAX_CONDITION: f64 = 1e6;

/// Draw laws until the population gram of the design means is well conditioned.
pub fn draw_identifiable_laws(cfg: &SimulationConfig) -> Result<Vec<EnvironmentLaw>> {
    cfg.validate()?;
    let off = cfg.first_active();
    let q = cfg.p - off;
    let k_act = cfg.k_star.rows(off, q).into_owned();
    let mut rng: ChaCha8Rng = stream_rng(cfg.seed, 0);
    for _ in 0..10_000 {
        let laws = draw_laws(q, cfg.z_envs, cfg.s1, cfg.s2, &k_act, &mut rng)?;
        let mut gram = DMatrix::zeros(cfg.p, cfg.p);
        for (law, &n) in laws.iter().zip(&cfg.n_per_env) {
            let mut m = DVector::from_element(cfg.p, 1.0);
            m.rows_mut(off, q).copy_from(&law.mu);
            gram.ger(n as f64, &m, &m, 1.0);
        }
        let spec = SymSpectrum::new(&gram);
        if spec.min() > 0.0 && spec.condition_number() < COVERAGE_MAX_CONDITION {
            return Ok(laws);
        }
    }
    Err(GiError::InvalidData("could not draw environment means with a well-conditioned gram".into()))
}

/// Empirical coverage of the normal intervals around β̂ with laws fixed
/// across replicates.
pub fn coverage_study(cfg: &SimulationConfig, replicates: usize, level: f64, form: OmegaForm) -> Result<CoverageResult> {
    if replicates < 2 {
        return Err(GiError::InvalidData("coverage needs at least two replicates".into()));
    }
    let laws = draw_identifiable_laws(cfg)?;
    let p = cfg.p;
    let reps = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let d = sample_from_laws(cfg, &laws, derive_seed(cfg.seed, r as u64))?;
            let f = fit(&d, DEFAULT_RANK_TOL)?;
            let rep = asymptotic_covariance_with(&f, level, form)?;
            Ok(rep)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut covered = vec![0usize; p];
    let mut width = vec![0.0; p];
    let mut mean_acov = DMatrix::zeros(p, p);
    let mut mean_beta = DVector::zeros(p);
    for rep in &reps {
        for j in 0..p {
            if rep.ci_lower[j] <= cfg.beta_star[j] && cfg.beta_star[j] <= rep.ci_upper[j] {
                covered[j] += 1;
            }
            width[j] += (rep.ci_upper[j] - rep.ci_lower[j]) / replicates as f64;
        }
        mean_acov += &rep.acov / replicates as f64;
        mean_beta += &rep.beta_hat / replicates as f64;
    }
    let mut mc_cov = DMatrix::zeros(p, p);
    for rep in &reps {
        let dev = &rep.beta_hat - &mean_beta;
        mc_cov.ger(1.0 / (replicates - 1) as f64, &dev, &dev, 1.0);
    }
    let rel_frobenius = (&mean_acov - &mc_cov).norm() / mc_cov.norm();
    Ok(CoverageResult {
        replicates,
        level,
        form,
        coverage: covered.iter().map(|&c| c as f64 / replicates as f64).collect(),
        mean_acov,
        mc_cov,
        rel_frobenius,
        mean_width: width,
        laws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::ellipsoid_slack;
    use approx::assert_relative_eq;

    fn small_cfg(seed: u64) -> SimulationConfig {
        SimulationConfig {
            p: 2,
            z_envs: 3,
            n_per_env: vec![50, 60, 70],
            beta_star: DVector::from_vec(vec![1.0, 2.0]),
            k_star: DVector::from_vec(vec![0.3, -0.2]),
            s1: 1.0,
            s2: 2.0,
            intercept: false,
            seed,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = simulate_multienv(&small_cfg(5)).unwrap();
        let b = simulate_multienv(&small_cfg(5)).unwrap();
        assert_eq!(a.dataset.x(), b.dataset.x());
        assert_eq!(a.dataset.y(), b.dataset.y());
        let c = simulate_multienv(&small_cfg(6)).unwrap();
        assert_ne!(a.dataset.y(), c.dataset.y());
        assert_eq!(a.dataset.n(), 180);
        assert_eq!(a.dataset.rows_of(2).len(), 70);
    }

    #[test]
    fn slack_is_one_in_every_environment() {
        let sim = simulate_multienv(&SimulationConfig::multienv_preset(3)).unwrap();
        let k_act = sim.truth.k_star.rows(1, 4).into_owned();
        for law in &sim.truth.laws {
            assert_relative_eq!(ellipsoid_slack(&k_act, &law.sigma, law.noise_var).unwrap(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn preset_has_intercept_column() {
        let sim = simulate_multienv(&SimulationConfig::multienv_preset(1)).unwrap();
        let d = &sim.dataset;
        assert!(d.intercept());
        assert_eq!(d.p(), 5);
        assert!(d.x().column(0).iter().all(|&v| v == 1.0));
        assert_eq!(d.n_envs(), 6);
    }

    #[test]
    fn zero_k_gives_exogenous_noise() {
        let law = EnvironmentLaw::new(DVector::from_vec(vec![0.5]), DMatrix::from_element(1, 1, 2.0), &DVector::zeros(1), 1.0).unwrap();
        assert_eq!(law.noise_var, 1.0);
        let mut rng = stream_rng(9, 0);
        let beta = DVector::from_vec(vec![3.0]);
        let (x, y) = sample_environment(&law, &beta, &DVector::zeros(1), false, 200_000, &mut rng);
        let eps = &y - &x * &beta;
        let n = eps.len() as f64;
        let xm = x.column(0).mean();
        let cov = eps.iter().zip(x.column(0).iter()).map(|(e, xi)| e * (xi - xm)).sum::<f64>() / n;
        let var = eps.iter().map(|e| e * e).sum::<f64>() / n;
        assert!(cov.abs() < 4.0 * (2.0f64).sqrt() / n.sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0f64).sqrt() / n.sqrt());
    }

    #[test]
    fn invalid_configs() {
        let mut c = small_cfg(0);
        c.n_per_env.pop();
        assert!(c.validate().is_err());
        let mut c = SimulationConfig::multienv_preset(0);
        c.k_star[0] = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_cfg(0);
        c.s1 = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_strength_matches_training_law() {
        let cfg = UnivariateShift::default();
        let s = simulate_univariate_shift(&cfg, 0.0, 4).unwrap();
        assert_eq!(s.shift_var, 0.0);
        assert_eq!(s.shift_mean, 0.0);
        assert!(draw_perturbations(0.0, 10, 1).iter().all(|&v| v == 0.0));
        assert!(simulate_univariate_shift(&cfg, -1.0, 4).is_err());
    }

    #[test]
    fn perturbation_second_moment() {
        for &s in &[0.5, 2.0, 10.0] {
            let v = draw_perturbations(s, 100_000, 11);
            let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
            let n = sq.len() as f64;
            let m = sq.iter().sum::<f64>() / n;
            let sd = (sq.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((m - s).abs() < 4.0 * sd / n.sqrt(), "s={s} mean={m}");
        }
    }

    #[test]
    fn sweep_is_reproducible() {
        let cfg = UnivariateShift {
            n_train: 60,
            n_test: 40,
            ..Default::default()
        };
        let a = energy_benchmark(&cfg, &[0.5, 10.0], 1, 3, &BenchmarkOptions::default()).unwrap();
        let b = energy_benchmark(&cfg, &[0.5, 10.0], 1, 3, &BenchmarkOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.gi.iter().chain(&a.ols).chain(&a.causal).all(|&v| v >= 0.0));
        assert!(energy_benchmark(&cfg, &[2.0, 1.0], 1, 3, &BenchmarkOptions::default()).is_err());
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("s,log10_s,gi,ols,causal"));
    }

    #[test]
    fn mse_sweep_runs() {
        let mut cfg = small_cfg(2);
        cfg.n_per_env = vec![100; 3];
        let r = mse_benchmark(&cfg, &[1.0, 10.0], 2, 50).unwrap();
        assert_eq!(r.metric, SweepMetric::Mse);
        assert!(r.gi.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn coverage_widths_scale_with_noise() {
        // β* = K* = 0 with a tiny slack: acov is proportional to σ²
        let base = SimulationConfig {
            p: 2,
            z_envs: 3,
            n_per_env: vec![200; 3],
            beta_star: DVector::zeros(2),
            k_star: DVector::zeros(2),
            s1: 1.0,
            s2: 2.0,
            intercept: false,
            seed: 8,
        };
        let laws = draw_identifiable_laws(&base).unwrap();
        let scaled: Vec<EnvironmentLaw> = laws
            .iter()
            .map(|l| EnvironmentLaw {
                noise_var: 0.01,
                ..l.clone()
            })
            .collect();
        let d1 = sample_from_laws(&base, &laws, 1).unwrap();
        let d2 = sample_from_laws(&base, &scaled, 1).unwrap();
        let w = |d: &Dataset| {
            let r = asymptotic_covariance_with(&fit(d, DEFAULT_RANK_TOL).unwrap(), 0.95, OmegaForm::Linearized).unwrap();
            r.ci_upper[0] - r.ci_lower[0]
        };
        // same η draws, noise scaled by 0.1
        assert_relative_eq!(w(&d2) / w(&d1), 0.1, max_relative = 1e-8);
    }
}

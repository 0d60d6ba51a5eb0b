//! Multi-source samples: the dataset type, CSV ingestion, per-environment
//! summaries and the block-averaging operator.
//!
//! The block-averaging operator `H_Z` (replace every row by the mean of its
//! environment) is never materialized; [`centering_matrix`] applies it by
//! grouping rows. Per-environment covariances use denominator `n_z`, not
//! `n_z - 1`, which is what makes `XᵀX − MᵀM = Σ n_z Σ̂_z` exact.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GiError, Result};
use crate::linalg::max_abs;
use crate::serde_util;

pub const INTERCEPT_NAME: &str = "(intercept)";

/// Raw multi-source sample: `N` covariate rows, responses and environment ids.
///
/// Environment ids are dense `0..Z`; `labels[z]` is the external name of
/// environment `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    env: Vec<usize>,
    labels: Vec<String>,
    names: Vec<String>,
    intercept: bool,
    groups: Vec<Vec<usize>>,
}

impl Dataset {
    /// Build from dense environment ids. Labels default to `"1".."Z"`.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, env: Vec<usize>) -> Result<Self> {
        let z = env.iter().copied().max().map_or(0, |m| m + 1);
        let labels = (1..=z).map(|i| i.to_string()).collect();
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::from_parts(x, y, env, labels, names, false)
    }

    /// Build from arbitrary string labels, mapped to ids by first appearance.
    pub fn from_labels<S: AsRef<str>>(x: DMatrix<f64>, y: DVector<f64>, labels: &[S]) -> Result<Self> {
        let (env, labels) = map_labels(labels.iter().map(AsRef::as_ref));
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::from_parts(x, y, env, labels, names, false)
    }

    pub fn from_parts(
        x: DMatrix<f64>,
        y: DVector<f64>,
        env: Vec<usize>,
        labels: Vec<String>,
        names: Vec<String>,
        intercept: bool,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(GiError::EmptyInput("dataset has no rows".into()));
        }
        if x.ncols() == 0 {
            return Err(GiError::InvalidData("dataset has no covariate columns".into()));
        }
        if y.len() != n || env.len() != n {
            return Err(GiError::DimensionMismatch(format!(
                "x has {n} rows, y has {}, env has {}",
                y.len(),
                env.len()
            )));
        }
        if names.len() != x.ncols() {
            return Err(GiError::DimensionMismatch(format!(
                "{} column names for {} columns",
                names.len(),
                x.ncols()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(GiError::InvalidData("non-finite entry".into()));
        }
        let z = labels.len();
        let mut groups = vec![Vec::new(); z];
        for (i, &e) in env.iter().enumerate() {
            if e >= z {
                return Err(GiError::InvalidData(format!("environment id {e} out of range 0..{z}")));
            }
            groups[e].push(i);
        }
        if let Some(empty) = groups.iter().position(Vec::is_empty) {
            return Err(GiError::InvalidData(format!("environment '{}' has no rows", labels[empty])));
        }
        if intercept && x.column(0).iter().any(|&v| v != 1.0) {
            return Err(GiError::InvalidData("intercept flag set but column 1 is not all ones".into()));
        }
        Ok(Self {
            x,
            y,
            env,
            labels,
            names,
            intercept,
            groups,
        })
    }

    /// Prepend an all-ones column.
    pub fn with_intercept(self) -> Result<Self> {
        if self.intercept {
            return Ok(self);
        }
        let x = self.x.clone().insert_column(0, 1.0);
        let mut names = vec![INTERCEPT_NAME.to_string()];
        names.extend(self.names);
        Self::from_parts(x, self.y, self.env, self.labels, names, true)
    }

    pub fn with_names(self, names: Vec<String>) -> Result<Self> {
        Self::from_parts(self.x, self.y, self.env, self.labels, names, self.intercept)
    }

    /// Keep only the listed environments (by id), preserving row order.
    /// Ids are re-densified in the order given.
    pub fn select_envs(&self, ids: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.n_envs()];
        for (new, &old) in ids.iter().enumerate() {
            if old >= self.n_envs() {
                return Err(GiError::InvalidData(format!("environment id {old} out of range")));
            }
            remap[old] = new;
        }
        let rows: Vec<usize> = (0..self.n()).filter(|&i| remap[self.env[i]] != usize::MAX).collect();
        let x = self.x.select_rows(rows.iter());
        let y = self.y.select_rows(rows.iter());
        let env = rows.iter().map(|&i| remap[self.env[i]]).collect();
        let labels = ids.iter().map(|&i| self.labels[i].clone()).collect();
        Self::from_parts(x, y, env, labels, self.names.clone(), self.intercept)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn env(&self) -> &[usize] {
        &self.env
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }

    /// Row indices of environment `z`, in dataset order.
    pub fn rows_of(&self, z: usize) -> &[usize] {
        &self.groups[z]
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_envs(&self) -> usize {
        self.labels.len()
    }

    /// Index of the first non-intercept coordinate.
    pub fn first_active(&self) -> usize {
        usize::from(self.intercept)
    }
}

fn map_labels<'a>(raw: impl Iterator<Item = &'a str>) -> (Vec<usize>, Vec<String>) {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let env = raw
        .map(|s| {
            *ids.entry(s.to_string()).or_insert_with(|| {
                labels.push(s.to_string());
                labels.len() - 1
            })
        })
        .collect();
    (env, labels)
}

/// Column selection for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub response: String,
    pub env: String,
    pub covariates: Vec<String>,
    pub add_intercept: bool,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    if schema.covariates.is_empty() {
        return Err(GiError::Schema("no covariate columns requested".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(GiError::EmptyInput("no header row".into()));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GiError::Schema(format!("missing column '{name}'")))
    };
    let y_col = find(&schema.response)?;
    let env_col = find(&schema.env)?;
    let x_cols = schema.covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut raw_env = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| GiError::Parse {
                    row,
                    column: headers[col].to_string(),
                    value: raw.to_string(),
                })
        };
        ys.push(cell(y_col)?);
        for &c in &x_cols {
            xs.push(cell(c)?);
        }
        raw_env.push(record.get(env_col).unwrap_or("").to_string());
    }
    if ys.is_empty() {
        return Err(GiError::EmptyInput("no data rows".into()));
    }
    let p = x_cols.len();
    let x = DMatrix::from_row_slice(ys.len(), p, &xs);
    let (env, labels) = map_labels(raw_env.iter().map(String::as_str));
    let ds = Dataset::from_parts(x, DVector::from_vec(ys), env, labels, schema.covariates.clone(), false)?;
    if schema.add_intercept {
        ds.with_intercept()
    } else {
        Ok(ds)
    }
}

/// Read a covariate-only matrix (no response, no env) from CSV. An empty
/// `covariates` list selects every column.
pub fn read_covariates_csv<R: Read>(reader: R, covariates: &[String]) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(GiError::EmptyInput("no header row".into()));
    }
    let all: Vec<String>;
    let covariates = if covariates.is_empty() {
        all = headers.iter().map(str::to_string).collect();
        &all[..]
    } else {
        covariates
    };
    let cols = covariates
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| GiError::Schema(format!("missing column '{name}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut xs = Vec::new();
    let mut n = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        for &c in &cols {
            let raw = record.get(c).unwrap_or("");
            let v = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| GiError::Parse {
                row: i + 1,
                column: headers[c].to_string(),
                value: raw.to_string(),
            })?;
            xs.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(GiError::EmptyInput("no data rows".into()));
    }
    Ok(DMatrix::from_row_slice(n, cols.len(), &xs))
}

impl Dataset {
    /// Write `env,response,covariates...` with 17 significant digits. The
    /// intercept column is not written.
    pub fn write_csv<W: std::io::Write>(&self, w: W, env_col: &str, response_col: &str) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let a = self.first_active();
        let mut header = vec![env_col.to_string(), response_col.to_string()];
        header.extend(self.names[a..].iter().cloned());
        out.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.labels[self.env[i]].clone(), format!("{:.16e}", self.y[i])];
            rec.extend((a..self.p()).map(|j| format!("{:.16e}", self.x[(i, j)])));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-environment sample size, mean and covariance (denominator `n_z`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSummary {
    pub env_id: usize,
    pub label: String,
    pub n_z: usize,
    #[serde(with = "serde_util::vector")]
    pub mu_hat: DVector<f64>,
    #[serde(with = "serde_util::matrix")]
    pub sigma_hat: DMatrix<f64>,
}

/// Two-pass mean/covariance per environment, rows reduced in dataset order.
pub fn summarize(d: &Dataset) -> Vec<EnvironmentSummary> {
    let p = d.p();
    (0..d.n_envs())
        .map(|z| {
            let rows = d.rows_of(z);
            let n_z = rows.len();
            let mut mu = DVector::zeros(p);
            for &i in rows {
                mu += d.x.row(i).transpose();
            }
            mu /= n_z as f64;
            let mut sigma = DMatrix::zeros(p, p);
            for &i in rows {
                let c = d.x.row(i).transpose() - &mu;
                sigma.ger(1.0, &c, &c, 1.0);
            }
            sigma /= n_z as f64;
            EnvironmentSummary {
                env_id: z,
                label: d.labels[z].clone(),
                n_z,
                mu_hat: mu,
                sigma_hat: sigma,
            }
        })
        .collect()
}

/// `M_Z = H_Z X`: row `i` holds the covariate mean of row `i`'s environment.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteringMatrix {
    pub m: DMatrix<f64>,
}

/// Replace each row of `mat` by the mean of its group under `env`.
pub fn average_by_env(mat: &DMatrix<f64>, env: &[usize], n_envs: usize) -> DMatrix<f64> {
    let cols = mat.ncols();
    let mut sums = DMatrix::<f64>::zeros(n_envs, cols);
    let mut counts = vec![0usize; n_envs];
    for (i, &e) in env.iter().enumerate() {
        counts[e] += 1;
        for j in 0..cols {
            sums[(e, j)] += mat[(i, j)];
        }
    }
    DMatrix::from_fn(mat.nrows(), cols, |i, j| {
        let e = env[i];
        sums[(e, j)] / counts[e] as f64
    })
}

pub fn centering_matrix(d: &Dataset) -> CenteringMatrix {
    let summaries = summarize(d);
    let m = DMatrix::from_fn(d.n(), d.p(), |i, j| summaries[d.env[i]].mu_hat[j]);
    CenteringMatrix { m }
}

/// `Σ_z n_z μ̂_z μ̂_zᵀ`.
pub fn weighted_mean_gram(summaries: &[EnvironmentSummary]) -> DMatrix<f64> {
    let p = summaries.first().map_or(0, |s| s.mu_hat.len());
    let mut g = DMatrix::zeros(p, p);
    for s in summaries {
        g.ger(s.n_z as f64, &s.mu_hat, &s.mu_hat, 1.0);
    }
    g
}

/// `Σ_z n_z Σ̂_z`.
pub fn pooled_within_scatter(summaries: &[EnvironmentSummary]) -> DMatrix<f64> {
    let p = summaries.first().map_or(0, |s| s.mu_hat.len());
    summaries
        .iter()
        .fold(DMatrix::zeros(p, p), |acc, s| acc + &s.sigma_hat * s.n_z as f64)
}

/// Max-abs residuals of the exact identities relating `X`, `M` and the summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityReport {
    /// ‖XᵀM − MᵀM‖
    pub xtm_minus_mtm: f64,
    /// ‖XᵀX − MᵀM − Σ n_z Σ̂_z‖
    pub scatter_residual: f64,
    /// ‖MᵀM − Σ n_z μ̂_z μ̂_zᵀ‖
    pub gram_residual: f64,
    /// max(1, max|XᵀX|)
    pub scale: f64,
    pub pass: bool,
}

pub const IDENTITY_TOL: f64 = 1e-9;

pub fn verify_identities(d: &Dataset) -> IdentityReport {
    verify_identities_with(d, &centering_matrix(d))
}

/// Same as [`verify_identities`] but against a caller-supplied `M`.
pub fn verify_identities_with(d: &Dataset, m: &CenteringMatrix) -> IdentityReport {
    let summaries = summarize(d);
    let x = &d.x;
    let xtx = x.transpose() * x;
    let mtm = m.m.transpose() * &m.m;
    let xtm = x.transpose() * &m.m;
    let within = pooled_within_scatter(&summaries);
    let gram = weighted_mean_gram(&summaries);

    let xtm_minus_mtm = max_abs(&(&xtm - &mtm));
    let scatter_residual = max_abs(&(&xtx - &mtm - within));
    let gram_residual = max_abs(&(&mtm - gram));
    let scale = max_abs(&xtx).max(1.0);
    let bound = IDENTITY_TOL * scale;
    IdentityReport {
        xtm_minus_mtm,
        scatter_residual,
        gram_residual,
        scale,
        pass: xtm_minus_mtm <= bound && scatter_residual <= bound && gram_residual <= bound,
    }
}

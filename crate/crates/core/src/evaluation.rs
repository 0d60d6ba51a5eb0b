//! Energy statistics and prediction scores.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GiError, Result};
use crate::rng::stream_rng;

/// Default cap on the number of pairwise distances one statistic may touch.
pub const MAX_PAIRS: u128 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyResult {
    pub value: f64,
    pub n1: usize,
    pub n2: usize,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_samples(a: &DMatrix<f64>, b: &DMatrix<f64>, limit: u128) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(GiError::DimensionMismatch(format!(
            "samples have dimensions {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.ncols() == 0 || a.nrows() == 0 || b.nrows() == 0 {
        return Err(GiError::EmptyInput("energy distance needs non-empty samples".into()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(GiError::InvalidData("non-finite sample entry".into()));
    }
    let (n1, n2) = (a.nrows() as u128, b.nrows() as u128);
    let pairs = n1 * n2 + n1 * n1 + n2 * n2;
    if pairs > limit {
        return Err(GiError::TooManyPairs { pairs, limit });
    }
    Ok(())
}

/// Two-sample energy V-statistic with Euclidean distance:
/// `2/(n₁n₂) ΣΣ|aᵢ−bⱼ| − 1/n₁² ΣΣ|aᵢ−aⱼ| − 1/n₂² ΣΣ|bᵢ−bⱼ|`.
pub fn energy_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<EnergyResult> {
    energy_distance_with_limit(a, b, MAX_PAIRS)
}

pub fn energy_distance_with_limit(a: &DMatrix<f64>, b: &DMatrix<f64>, max_pairs: u128) -> Result<EnergyResult> {
    check_samples(a, b, max_pairs)?;
    let (ra, rb) = (rows_of(a), rows_of(b));
    let (n1, n2) = (ra.len() as f64, rb.len() as f64);
    // full double sums in one fixed order, so identical samples give exactly 0
    let pair_sum = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> f64 { xs.iter().map(|x| ys.iter().map(|y| dist(x, y)).sum::<f64>()).sum() };
    let cross = pair_sum(&ra, &rb);
    let value = 2.0 * cross / (n1 * n2) - pair_sum(&ra, &ra) / (n1 * n1) - pair_sum(&rb, &rb) / (n2 * n2);
    Ok(EnergyResult {
        value,
        n1: ra.len(),
        n2: rb.len(),
    })
}

/// Energy statistic plus its permutation null distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    /// Sorted ascending.
    pub null: Vec<f64>,
}

impl PermutationTest {
    /// Empirical `q`-quantile of the null (nearest-rank).
    pub fn null_quantile(&self, q: f64) -> f64 {
        let n = self.null.len();
        let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
        self.null[rank - 1]
    }

    /// `(1 + #{null ≥ stat}) / (1 + B)`.
    pub fn p_value(&self) -> f64 {
        let ge = self.null.iter().filter(|&&v| v >= self.statistic).count();
        (1 + ge) as f64 / (1 + self.null.len()) as f64
    }
}

/// Permutation null of the energy statistic: pooled labels reshuffled
/// `n_perm` times with sizes `(n₁, n₂)` held fixed.
pub fn energy_permutation_test(a: &DMatrix<f64>, b: &DMatrix<f64>, n_perm: usize, seed: u64) -> Result<PermutationTest> {
    let n1 = a.nrows();
    let n2 = b.nrows();
    let total = n1 + n2;
    check_samples(a, b, MAX_PAIRS)?;
    if (total as u128) * (total as u128) > MAX_PAIRS {
        return Err(GiError::TooManyPairs {
            pairs: (total as u128) * (total as u128),
            limit: MAX_PAIRS,
        });
    }
    let pooled: Vec<Vec<f64>> = rows_of(a).into_iter().chain(rows_of(b)).collect();
    let mut d = vec![0.0; total * total];
    for i in 0..total {
        for j in (i + 1)..total {
            let v = dist(&pooled[i], &pooled[j]);
            d[i * total + j] = v;
            d[j * total + i] = v;
        }
    }
    let row_sums: Vec<f64> = d.chunks(total).map(|r| r.iter().sum()).collect();
    let grand: f64 = row_sums.iter().sum();
    let (f1, f2) = (n1 as f64, n2 as f64);

    // With g the 0/1 indicator of group 1: S11 = gᵀDg, S12 = gᵀD1 − S11,
    // S22 = 1ᵀD1 − 2gᵀD1 + S11.
    let stat_for = |g: &[f64]| -> f64 {
        let mut s11 = 0.0;
        let mut g_rows = 0.0;
        for i in 0..total {
            if g[i] != 0.0 {
                let row = &d[i * total..(i + 1) * total];
                s11 += row.iter().zip(g).map(|(v, w)| v * w).sum::<f64>();
                g_rows += row_sums[i];
            }
        }
        let s12 = g_rows - s11;
        let s22 = grand - 2.0 * g_rows + s11;
        2.0 * s12 / (f1 * f2) - s11 / (f1 * f1) - s22 / (f2 * f2)
    };

    let mut g: Vec<f64> = (0..total).map(|i| if i < n1 { 1.0 } else { 0.0 }).collect();
    let statistic = stat_for(&g);
    let mut rng = stream_rng(seed, 0);
    let mut null: Vec<f64> = (0..n_perm)
        .map(|_| {
            g.shuffle(&mut rng);
            stat_for(&g)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    Ok(PermutationTest { statistic, null })
}

fn env_sample(d: &Dataset, z: usize, covariates_only: bool) -> DMatrix<f64> {
    let a = d.first_active();
    let q = d.p() - a;
    let rows = d.rows_of(z);
    let cols = if covariates_only { q } else { q + 1 };
    DMatrix::from_fn(rows.len(), cols, |r, c| {
        if c < q {
            d.x()[(rows[r], a + c)]
        } else {
            d.y()[rows[r]]
        }
    })
}

/// Pairwise energy distances between environment samples (intercept column
/// dropped; `covariates_only = false` appends the response).
pub fn energy_matrix(d: &Dataset, covariates_only: bool) -> Result<DMatrix<f64>> {
    let z = d.n_envs();
    if d.p() == d.first_active() && covariates_only {
        return Err(GiError::InvalidData("no non-intercept covariates".into()));
    }
    let samples: Vec<DMatrix<f64>> = (0..z).map(|e| env_sample(d, e, covariates_only)).collect();
    let mut m = DMatrix::zeros(z, z);
    for i in 0..z {
        for j in (i + 1)..z {
            let v = energy_distance(&samples[i], &samples[j])?.value;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Environment ids by descending row mean of `m`; ties by ascending id.
pub fn peculiarity_ranking(m: &DMatrix<f64>) -> Vec<usize> {
    let means: Vec<f64> = m.row_iter().map(|r| r.mean()).collect();
    let mut ids: Vec<usize> = (0..m.nrows()).collect();
    ids.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    ids
}

pub fn mse(pred: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(GiError::DimensionMismatch(format!(
            "{} predictions for {} observations",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(GiError::EmptyInput("no observations".into()));
    }
    Ok((pred - truth).norm_squared() / pred.len() as f64)
}

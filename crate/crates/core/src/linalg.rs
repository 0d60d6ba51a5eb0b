//! Small dense helpers on top of nalgebra shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Max-abs entry of a matrix (0 for empty).
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Tolerance scale `max(1, max|m|)`.
pub fn scale(m: &DMatrix<f64>) -> f64 {
    max_abs(m).max(1.0)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymSpectrum {
    pub values: Vec<f64>,
    /// Column `i` is the eigenvector of `values[i]`.
    pub vectors: DMatrix<f64>,
}

impl SymSpectrum {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let eig = SymmetricEigen::new(symmetrize(m));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { values, vectors }
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    /// `min > rank_tol * max` with a strictly positive top eigenvalue.
    pub fn is_well_posed(&self, rank_tol: f64) -> bool {
        let max = self.max();
        max > 0.0 && self.min() > rank_tol * max
    }

    /// Number of eigenvalues above `rank_tol * max`.
    pub fn rank(&self, rank_tol: f64) -> usize {
        let max = self.max();
        if max <= 0.0 {
            return 0;
        }
        self.values.iter().filter(|&&v| v > rank_tol * max).count()
    }

    pub fn condition_number(&self) -> f64 {
        let min = self.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            self.max() / min
        }
    }
}

/// Inverse of a symmetric positive definite matrix whose spectrum passed the gate.
///
/// Cholesky first; the eigen route only runs when Cholesky rejects a
/// matrix that is numerically on the edge.
pub fn spd_inverse(m: &DMatrix<f64>, spectrum: &SymSpectrum) -> DMatrix<f64> {
    let sym = symmetrize(m);
    if let Some(chol) = sym.clone().cholesky() {
        return symmetrize(&chol.inverse());
    }
    let inv_vals = DVector::from_iterator(spectrum.values.len(), spectrum.values.iter().map(|v| 1.0 / v));
    let v = &spectrum.vectors;
    v * DMatrix::from_diagonal(&inv_vals) * v.transpose()
}

/// Solve `m x = b` for symmetric positive definite `m` (gate already passed).
pub fn spd_solve(m: &DMatrix<f64>, spectrum: &SymSpectrum, b: &DVector<f64>) -> DVector<f64> {
    let sym = symmetrize(m);
    if let Some(chol) = sym.cholesky() {
        return chol.solve(b);
    }
    spd_inverse(m, spectrum) * b
}

/// Symmetric square root of a PSD matrix; negative round-off eigenvalues are clamped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let spec = SymSpectrum::new(m);
    let roots = DVector::from_iterator(spec.values.len(), spec.values.iter().map(|v| v.max(0.0).sqrt()));
    let v = &spec.vectors;
    symmetrize(&(v * DMatrix::from_diagonal(&roots) * v.transpose()))
}

/// Extract the trailing block `m[from.., from..]`.
pub fn trailing_block(m: &DMatrix<f64>, from: usize) -> DMatrix<f64> {
    let n = m.nrows() - from;
    m.view((from, from), (n, n)).into_owned()
}

pub fn trailing_vec(v: &DVector<f64>, from: usize) -> DVector<f64> {
    v.rows(from, v.len() - from).into_owned()
}

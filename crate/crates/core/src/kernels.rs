//! Covariance functions, covariance assembly and jittered Cholesky.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Anisotropic squared-exponential kernel parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl SeParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let p = SeParams { signal_variance, lengthscales };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0) || self.lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::input(format!("SE parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Kernel value without dimension checks.
    #[inline]
    pub fn eval(&self, xi: &[f64], xj: &[f64]) -> f64 {
        let r2: f64 = xi
            .iter()
            .zip(xj)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let d = (a - b) / l;
                d * d
            })
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }
}

/// Scale family `a·C(b·d)` on Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleFamilyParams {
    pub amplitude: f64,
    pub lengthscale: f64,
}

impl ScaleFamilyParams {
    pub fn new(amplitude: f64, lengthscale: f64) -> Result<Self> {
        if !(amplitude > 0.0 && lengthscale > 0.0) {
            return Err(Error::input("scale family parameters must be positive"));
        }
        Ok(ScaleFamilyParams { amplitude, lengthscale })
    }

    pub fn eval(&self, z: &[f64], z2: &[f64]) -> f64 {
        self.amplitude * corr_from_sq_dist(self.lengthscale.powi(2) * sq_dist(z, z2))
    }
}

/// Isotropic squared-exponential `s²·exp(−‖x − x'‖² / 2ℓ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoParams {
    pub signal_std: f64,
    pub lengthscale: f64,
}

impl IsoParams {
    pub fn new(signal_std: f64, lengthscale: f64) -> Result<Self> {
        if !(signal_std > 0.0 && lengthscale > 0.0) {
            return Err(Error::input("isotropic kernel parameters must be positive"));
        }
        Ok(IsoParams { signal_std, lengthscale })
    }

    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        self.signal_std.powi(2) * (-sq_dist(x, x2) / (2.0 * self.lengthscale.powi(2))).exp()
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(−d²/2)` from the squared distance.
#[inline]
pub fn corr_from_sq_dist(d2: f64) -> f64 {
    (-0.5 * d2).exp()
}

/// Squared-exponential kernel between two points.
pub fn se_kernel(xi: &[f64], xj: &[f64], p: &SeParams) -> Result<f64> {
    if xi.len() != p.dim() || xj.len() != p.dim() {
        return Err(Error::input(format!(
            "dimension mismatch: points {} and {}, kernel {}",
            xi.len(),
            xj.len(),
            p.dim()
        )));
    }
    Ok(p.eval(xi, xj))
}

/// Unit-lengthscale isotropic correlation `C(d) = exp(−d²/2)`.
pub fn unit_corr(d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::input(format!("distance must be nonnegative, got {d}")));
    }
    Ok(corr_from_sq_dist(d * d))
}

/// Covariance matrix of the rows of `points` under `kernel`.
pub fn cov_matrix<F>(points: &DMatrix<f64>, kernel: F) -> DMatrix<f64>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let rows = rows_of(points);
    let n = rows.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&rows[i], &rows[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Rows of a matrix as owned vectors.
pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Lower Cholesky factor together with the jitter that made it succeed.
#[derive(Clone, Debug)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.l.solve_lower_triangular(b).expect("nonsingular factor");
        self.l.tr_solve_lower_triangular(&y).expect("nonsingular factor")
    }

    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l.solve_lower_triangular(b).expect("nonsingular factor")
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let flat: Vec<f64> = self.l.transpose().as_slice().to_vec();
        DMatrix::from_row_slice(n, n, &linalg::chol_inverse(&flat, n))
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Cholesky of a symmetric matrix with escalating diagonal jitter.
///
/// Tries `δ ∈ {0, 1e-8, 1e-6, 1e-4}·mean(diag(M))`, skipping levels whose
/// relative size is below `jitter_start`.
pub fn chol_psd(m: &DMatrix<f64>, jitter_start: f64) -> Result<CholFactor> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::input("chol_psd needs a square matrix"));
    }
    // Row-major flat copy; symmetric so transpose is immaterial for the input.
    let flat: Vec<f64> = m.transpose().as_slice().to_vec();
    let md = linalg::mean_diag(&flat, n).abs();
    let mut tried = 0.0;
    for rel in linalg::JITTER_SCHEDULE.iter().filter(|r| **r >= jitter_start) {
        let delta = rel * md;
        tried = delta;
        if let Some(l) = linalg::cholesky(&flat, n, delta) {
            return Ok(CholFactor { l: DMatrix::from_row_slice(n, n, &l), jitter: delta });
        }
    }
    Err(Error::numerical(format!(
        "Cholesky failed at maximum jitter δ = {tried:e} (n = {n})"
    )))
}

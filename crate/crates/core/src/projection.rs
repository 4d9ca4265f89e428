//! Global projection layer: GP prior over the entries of the local projection
//! matrices `W_j`, sparse global inducing variables with a per-entry Gaussian
//! posterior, the implied marginal `q(W_j)`, and its KL penalty.
//!
//! Entry `(k, d)` of `W` has prior covariance `s² exp(−‖x − x′‖² / (2ℓ_k²))`
//! across test locations; all `D` entries of row `k` share the same kernel.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;

/// Global inducing inputs `x̃_ℓ` and `q(R_ℓkd) = N(μ_ℓkd, σ²_ℓkd)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalInducing {
    /// L₂×D.
    pub inputs: DMatrix<f64>,
    /// Row `k` count of the projection.
    pub k: usize,
    /// Flat L₂×K×D, see [`GlobalInducing::idx`].
    pub post_mean: Vec<f64>,
    pub post_var: Vec<f64>,
}

impl GlobalInducing {
    pub fn l2(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn idx(&self, l: usize, k: usize, d: usize) -> usize {
        (l * self.k + k) * self.dim() + d
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.l2() * self.k * self.dim();
        if self.post_mean.len() != n || self.post_var.len() != n {
            return Err(Error::input("global inducing posterior has the wrong size"));
        }
        if self.post_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::input("global inducing variances must be positive"));
        }
        Ok(())
    }
}

/// `Θ_W = (s, ℓ_{w,1..K})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaW {
    pub signal_std: f64,
    pub row_lengthscales: Vec<f64>,
}

impl ThetaW {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal_std > 0.0) || self.row_lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::input("projection kernel parameters must be positive"));
        }
        Ok(())
    }
}

/// Entrywise moments of `q(W_j)` (K×D).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPosterior {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

/// Global quantities over a generic scalar, shared by evaluation and the gradient tape.
pub struct GlobalTerms<T> {
    pub l2: usize,
    pub k: usize,
    pub d: usize,
    /// L₂×D row-major.
    pub x_tilde: Vec<T>,
    pub mu: Vec<T>,
    pub var: Vec<T>,
    pub s: T,
    pub ell: Vec<T>,
}

impl GlobalTerms<f64> {
    pub fn from_state(g: &GlobalInducing, tw: &ThetaW) -> Self {
        let (l2, d) = (g.l2(), g.dim());
        let x_tilde = (0..l2).flat_map(|l| (0..d).map(move |c| (l, c))).map(|(l, c)| g.inputs[(l, c)]).collect();
        GlobalTerms {
            l2,
            k: g.k,
            d,
            x_tilde,
            mu: g.post_mean.clone(),
            var: g.post_var.clone(),
            s: tw.signal_std,
            ell: tw.row_lengthscales.clone(),
        }
    }
}

impl<T: Real> GlobalTerms<T> {
    fn idx(&self, l: usize, k: usize, d: usize) -> usize {
        (l * self.k + k) * self.d + d
    }

    fn kern(&self, k: usize, diffs: &[T]) -> T {
        let r2 = T::sum(diffs);
        (-(r2 / (self.ell[k].square() * 2.0))).exp() * self.s.square()
    }

    /// `s² exp(−‖x̃_a − x‖² / (2ℓ_k²))`.
    fn cross(&self, k: usize, a: usize, x: &[f64]) -> T {
        let diffs: Vec<T> = (0..self.d).map(|c| (self.x_tilde[a * self.d + c] - x[c]).square()).collect();
        self.kern(k, &diffs)
    }

    fn inducing(&self, k: usize, a: usize, b: usize) -> T {
        let diffs: Vec<T> =
            (0..self.d).map(|c| (self.x_tilde[a * self.d + c] - self.x_tilde[b * self.d + c]).square()).collect();
        self.kern(k, &diffs)
    }

    /// Cholesky factors of `K_RR^(k)` for each row `k`, with escalating jitter.
    pub fn factors(&self) -> Result<Vec<Vec<T>>> {
        let n = self.l2;
        (0..self.k)
            .map(|k| {
                let mut m = vec![T::cst(0.0); n * n];
                for a in 0..n {
                    m[a * n + a] = self.s.square();
                    for b in 0..a {
                        let v = self.inducing(k, a, b);
                        m[a * n + b] = v;
                        m[b * n + a] = v;
                    }
                }
                linalg::jitter_cholesky(&m, n).map(|(l, _)| l).map_err(|delta| {
                    Error::numerical(format!("K_RR factorization failed for row {k} (δ = {delta:e})"))
                })
            })
            .collect()
    }

    /// Entrywise mean and variance of `q(W)` at `x_star` (K×D row-major).
    pub fn qw_moments(&self, factors: &[Vec<T>], x_star: &[f64]) -> (Vec<T>, Vec<T>) {
        let n = self.l2;
        let mut mean = Vec::with_capacity(self.k * self.d);
        let mut var = Vec::with_capacity(self.k * self.d);
        for k in 0..self.k {
            let kjr: Vec<T> = (0..n).map(|l| self.cross(k, l, x_star)).collect();
            let alpha = linalg::chol_solve(&factors[k], n, &kjr);
            let base = self.s.square() - T::dot(&alpha, &kjr);
            let alpha_sq: Vec<T> = alpha.iter().map(|a| a.square()).collect();
            for d in 0..self.d {
                let mus: Vec<T> = (0..n).map(|l| self.mu[self.idx(l, k, d)]).collect();
                let vars: Vec<T> = (0..n).map(|l| self.var[self.idx(l, k, d)]).collect();
                mean.push(T::dot(&alpha, &mus));
                let v = base + T::dot(&alpha_sq, &vars);
                var.push(if v.value() > 0.0 { v } else { T::cst(0.0) });
            }
        }
        (mean, var)
    }

    /// `Σ_{k,d} KL(N(μ_kd, diag σ²_kd) ∥ N(0, K_RR^(k)))`.
    pub fn kl(&self, factors: &[Vec<T>]) -> T {
        let n = self.l2;
        let mut terms = Vec::with_capacity(self.k * self.d);
        for (k, l) in factors.iter().enumerate() {
            let logdet = linalg::chol_logdet(l, n);
            let inv = linalg::chol_inverse(l, n);
            let inv_diag: Vec<T> = (0..n).map(|a| inv[a * n + a]).collect();
            for d in 0..self.d {
                let mus: Vec<T> = (0..n).map(|a| self.mu[self.idx(a, k, d)]).collect();
                let vars: Vec<T> = (0..n).map(|a| self.var[self.idx(a, k, d)]).collect();
                let white = linalg::forward_solve(l, n, &mus);
                let log_vars: Vec<T> = vars.iter().map(|v| v.ln()).collect();
                let t = T::dot(&inv_diag, &vars) + T::dot(&white, &white) + logdet - T::sum(&log_vars) - n as f64;
                terms.push(t * 0.5);
            }
        }
        T::sum(&terms)
    }
}

/// Marginal moments of `q(W_j)` at the test location `x_star`.
pub fn qw_moments(g: &GlobalInducing, tw: &ThetaW, x_star: &[f64]) -> Result<ProjectionPosterior> {
    if tw.row_lengthscales.len() != g.k {
        return Err(Error::input("one projection lengthscale per row is required"));
    }
    if x_star.len() != g.dim() {
        return Err(Error::input("test point dimension does not match the inducing inputs"));
    }
    let terms = GlobalTerms::from_state(g, tw);
    let factors = terms.factors()?;
    let (mean, var) = terms.qw_moments(&factors, x_star);
    Ok(ProjectionPosterior {
        mean: DMatrix::from_row_slice(g.k, g.dim(), &mean),
        var: DMatrix::from_row_slice(g.k, g.dim(), &var),
    })
}

/// One draw of `W` with independent Gaussian entries (row-major draw order).
pub fn sample_w<R: Rng + ?Sized>(p: &ProjectionPosterior, rng: &mut R) -> DMatrix<f64> {
    let (k, d) = p.mean.shape();
    let mut w = DMatrix::zeros(k, d);
    for r in 0..k {
        for c in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            w[(r, c)] = p.mean[(r, c)] + p.var[(r, c)].sqrt() * e;
        }
    }
    w
}

/// KL divergence of `q(R)` from its GP prior, summed over all `(k, d)`.
pub fn kl_global(g: &GlobalInducing, tw: &ThetaW) -> Result<f64> {
    let terms = GlobalTerms::from_state(g, tw);
    Ok(terms.kl(&terms.factors()?))
}

/// Inducing inputs scattered around the input mean, small random posterior means, unit variances.
pub fn init_global_inducing<R: Rng + ?Sized>(data: &Dataset, l2: usize, k: usize, rng: &mut R) -> GlobalInducing {
    let mean = data.input_mean();
    let sd = data.input_std();
    let d = data.dim();
    let mut inputs = DMatrix::zeros(l2, d);
    for l in 0..l2 {
        for c in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            inputs[(l, c)] = mean[c] + e * sd[c];
        }
    }
    let post_mean = (0..l2 * k * d).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    GlobalInducing { inputs, k, post_mean, post_var: vec![1.0; l2 * k * d] }
}

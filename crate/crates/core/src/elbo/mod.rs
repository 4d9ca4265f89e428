//! Evidence lower bound of the two-layer model and its trainer.
//!
//! Per region `j` the bound is `Σ_i log(e^{T1} + e^{T2}) − KL(q(r) ∥ p(r))`,
//! and one global `KL(q(R) ∥ p(R))` is subtracted. The membership posteriors
//! `ρ_i = σ(T1 − T2)` are optimal in closed form and never stored as free
//! parameters.
//!
//! Region inputs enter centered at the test location, `z_i = W_j (x_i − x*_j)`,
//! and the local response is modeled as `f = √a · g` with `g` a unit-variance
//! GP on `z` whose inducing values are `r`.

pub mod psi;
pub mod quadrature;
pub mod train;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{logaddexp, Real};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::jump_gp::LocalRegion;
use crate::kernels::{chol_psd, cov_matrix, sq_dist, CholFactor};
use crate::projection::{GlobalInducing, GlobalTerms, ProjectionPosterior, ThetaW};
use quadrature::{expected_log_sigmoid, GaussHermite};

pub use train::{train, Optimizer, TrainConfig, TrainReport};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Floor added to the local amplitude.
pub const AMPLITUDE_FLOOR: f64 = 1e-8;

/// Local inducing inputs `z̃` (fixed) with `q(r) = N(μ_r, UᵀU)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalInducing {
    /// L₁×K.
    pub inputs: DMatrix<f64>,
    pub post_mean: DVector<f64>,
    /// Upper-triangular root `U`.
    pub post_root: DMatrix<f64>,
}

impl LocalInducing {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn post_cov(&self) -> DMatrix<f64> {
        self.post_root.transpose() * &self.post_root
    }

    /// Unit SE kernel on the inducing inputs.
    pub fn prior_cov(&self) -> DMatrix<f64> {
        cov_matrix(&self.inputs, |a, b| (-0.5 * sq_dist(a, b)).exp())
    }

    pub fn prior_factor(&self) -> Result<CholFactor> {
        chol_psd(&self.prior_cov(), 0.0)
    }
}

/// Per-region hyperparameters `Θ^(j)` plus the current optimal `ρ^(j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    /// `(ν₀, ν₁..ν_K)` acting on `[1, z]`.
    pub boundary: Vec<f64>,
    pub noise_variance: f64,
    pub mean: f64,
    pub amplitude: f64,
    pub outlier_level: f64,
    pub rho: Vec<f64>,
}

impl RegionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance > 0.0 && self.amplitude > 0.0 && self.outlier_level > 0.0) {
            return Err(Error::input("region variances and outlier level must be positive"));
        }
        if self.rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::input("membership probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionState {
    pub region: LocalRegion,
    pub local: LocalInducing,
    pub params: RegionParams,
}

/// Full variational state, with the training pool kept for neighborhood queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub global: GlobalInducing,
    pub theta_w: ThetaW,
    pub regions: Vec<RegionState>,
    pub train_data: Dataset,
    pub config: TrainConfig,
}

impl VariationalState {
    pub fn latent_dim(&self) -> usize {
        self.global.k
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        self.theta_w.validate()?;
        if self.theta_w.row_lengthscales.len() != self.global.k {
            return Err(Error::input("one projection lengthscale per latent dimension is required"));
        }
        for r in &self.regions {
            r.params.validate()?;
            if r.region.dim() != self.global.dim() || r.local.inputs.ncols() != self.global.k {
                return Err(Error::input("region dimensions are inconsistent with the global layer"));
            }
            if r.params.boundary.len() != self.global.k + 1 {
                return Err(Error::input("boundary must have K + 1 coefficients"));
            }
        }
        Ok(())
    }
}

/// Per-point likelihood scalars of one region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodScalars {
    pub v1: f64,
    pub t2: f64,
    pub e_f: f64,
    pub quad: f64,
}

/// Region inputs centered at the test location, one row per neighbor.
pub fn centered_inputs(region: &LocalRegion) -> Vec<Vec<f64>> {
    (0..region.len())
        .map(|i| region.inputs.row(i).iter().zip(&region.x_star).map(|(a, b)| a - b).collect())
        .collect()
}

/// Constants of one region that do not depend on trainable parameters.
pub struct RegionConsts {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub x_star: Vec<f64>,
    /// L₁×K row-major.
    pub z: Vec<f64>,
    pub l1: usize,
    pub k: usize,
    /// `K_r⁻¹` row-major.
    pub kr_inv: Vec<f64>,
    pub kr_logdet: f64,
    /// Fixed `u_j`; the bound is unbounded above if it is trained.
    pub outlier_level: f64,
}

impl RegionConsts {
    pub fn new(rs: &RegionState) -> Result<Self> {
        let chol = rs.local.prior_factor()?;
        let l1 = rs.local.len();
        let inv = chol.inverse();
        Ok(RegionConsts {
            x: centered_inputs(&rs.region),
            y: rs.region.targets.iter().copied().collect(),
            x_star: rs.region.x_star.clone(),
            z: rs.local.inputs.transpose().as_slice().to_vec(),
            l1,
            k: rs.local.inputs.ncols(),
            kr_inv: inv.transpose().as_slice().to_vec(),
            kr_logdet: chol.logdet(),
            outlier_level: rs.params.outlier_level,
        })
    }
}

/// Trainable local quantities of one region over a generic scalar.
pub struct RegionVars<T> {
    pub mu_r: Vec<T>,
    /// Full L₁×L₁ row-major `U` (zeros below the diagonal).
    pub root: Vec<T>,
    pub nu: Vec<T>,
    pub noise_var: T,
    pub mean: T,
    pub amp: T,
    pub outlier: T,
}

impl RegionVars<f64> {
    pub fn from_state(rs: &RegionState) -> Self {
        let p = &rs.params;
        RegionVars {
            mu_r: rs.local.post_mean.iter().copied().collect(),
            root: rs.local.post_root.transpose().as_slice().to_vec(),
            nu: p.boundary.clone(),
            noise_var: p.noise_variance,
            mean: p.mean,
            amp: p.amplitude,
            outlier: p.outlier_level,
        }
    }
}

/// `KL(N(μ_r, UᵀU) ∥ N(0, K_r))`.
pub fn kl_local_with<T: Real>(c: &RegionConsts, v: &RegionVars<T>) -> T {
    let l1 = c.l1;
    let sigma = gram(&v.root, l1);
    let beta = mat_vec(&c.kr_inv, &v.mu_r, l1);
    let log_diag: Vec<T> = (0..l1).map(|a| v.root[a * l1 + a].square().ln()).collect();
    let t = T::dot_cst(&sigma, &c.kr_inv) + T::dot(&v.mu_r, &beta) - l1 as f64 + c.kr_logdet - T::sum(&log_diag);
    t * 0.5
}

/// `UᵀU` for row-major upper-triangular `U`.
fn gram<T: Real>(u: &[T], l1: usize) -> Vec<T> {
    let mut out = vec![T::cst(0.0); l1 * l1];
    for a in 0..l1 {
        for b in 0..=a {
            // (UᵀU)_ab = Σ_{c ≤ min(a,b)} U_ca U_cb
            let ca: Vec<T> = (0..=b).map(|c| u[c * l1 + a]).collect();
            let cb: Vec<T> = (0..=b).map(|c| u[c * l1 + b]).collect();
            let s = T::dot(&ca, &cb);
            out[a * l1 + b] = s;
            out[b * l1 + a] = s;
        }
    }
    out
}

fn mat_vec<T: Real>(m: &[f64], v: &[T], n: usize) -> Vec<T> {
    (0..n).map(|a| T::dot_cst(v, &m[a * n..(a + 1) * n])).collect()
}

/// `T1` and `T2` for every neighbor, from the projection moments (K×D row-major).
pub fn point_terms<T: Real>(
    c: &RegionConsts,
    v: &RegionVars<T>,
    qw_mean: &[T],
    qw_var: &[T],
    gh: &GaussHermite,
) -> Vec<(T, T)> {
    let (l1, k) = (c.l1, c.k);
    let sqrt_amp = v.amp.sqrt();
    let beta = mat_vec(&c.kr_inv, &v.mu_r, l1);
    // B = K⁻¹ (μμᵀ + Σ) K⁻¹
    let mut second = gram(&v.root, l1);
    for a in 0..l1 {
        for b in 0..l1 {
            second[a * l1 + b] = second[a * l1 + b] + v.mu_r[a] * v.mu_r[b];
        }
    }
    let b_mat: Vec<T> = (0..l1 * l1)
        .map(|ab| {
            let (a, b) = (ab / l1, ab % l1);
            let w: Vec<f64> = (0..l1 * l1).map(|cd| c.kr_inv[a * l1 + cd / l1] * c.kr_inv[(cd % l1) * l1 + b]).collect();
            T::dot_cst(&second, &w)
        })
        .collect();
    let log_noise = v.noise_var.ln();
    let log_u = v.outlier.ln();
    c.x.iter()
        .zip(&c.y)
        .map(|(x, &y)| {
            let (m, s) = psi::latent_moments(x, qw_mean, qw_var, k);
            let p1 = psi::psi1_row(&m, &s, &c.z, l1, sqrt_amp);
            let p2 = psi::psi2_point(&m, &s, &c.z, l1, sqrt_amp);
            let e_f = T::dot(&p1, &beta);
            let t2 = T::dot(&p2, &b_mat);
            let v1 = v.amp - T::dot_cst(&p2, &c.kr_inv);
            let yt = -v.mean + y;
            let quad = (yt.square() - yt * e_f * 2.0 + v1 + t2) / (v.noise_var * 2.0);
            let (mu_z, var_z) = boundary_terms(&m, &s, &v.nu);
            let sd_z = if var_z.value() > 0.0 { var_z.sqrt() } else { T::cst(0.0) };
            let (e_in, e_out) = expected_log_sigmoid(mu_z, sd_z, gh);
            let t1 = -quad - log_noise * 0.5 - 0.5 * LN_2PI + e_in;
            let t_out = -log_u + e_out;
            (t1, t_out)
        })
        .collect()
}

fn boundary_terms<T: Real>(m: &[T], s: &[T], nu: &[T]) -> (T, T) {
    let mu = nu[0] + T::dot(&nu[1..], m);
    let nu2: Vec<T> = nu[1..].iter().map(|v| v.square()).collect();
    (mu, T::dot(&nu2, s))
}

/// Region contribution `Σ_i log(e^{T1} + e^{T2}) − KL_local`.
pub fn region_term<T: Real>(c: &RegionConsts, v: &RegionVars<T>, qw_mean: &[T], qw_var: &[T], gh: &GaussHermite) -> T {
    let terms: Vec<T> = point_terms(c, v, qw_mean, qw_var, gh).into_iter().map(|(a, b)| logaddexp(a, b)).collect();
    T::sum(&terms) - kl_local_with(c, v)
}

/// Likelihood scalars `(V1, T2, E_f, quad)` for every neighbor.
pub fn likelihood_scalars(
    region: &LocalRegion,
    li: &LocalInducing,
    qw: &ProjectionPosterior,
    params: &RegionParams,
) -> Result<Vec<LikelihoodScalars>> {
    let rs = RegionState { region: region.clone(), local: li.clone(), params: params.clone() };
    let c = RegionConsts::new(&rs)?;
    let v = RegionVars::from_state(&rs);
    let (mean, var) = (qw.mean.transpose().as_slice().to_vec(), qw.var.transpose().as_slice().to_vec());
    let sqrt_amp = v.amp.sqrt();
    let kr_inv = DMatrix::from_row_slice(c.l1, c.l1, &c.kr_inv);
    let mu = DVector::from_vec(v.mu_r.clone());
    let b = &kr_inv * (&mu * mu.transpose() + li.post_cov()) * &kr_inv;
    let beta = &kr_inv * &mu;
    Ok(c.x
        .iter()
        .zip(&c.y)
        .map(|(x, &y)| {
            let (m, s) = psi::latent_moments(x, &mean, &var, c.k);
            let p1 = DVector::from_vec(psi::psi1_row(&m, &s, &c.z, c.l1, sqrt_amp));
            let p2 = DMatrix::from_row_slice(c.l1, c.l1, &psi::psi2_point(&m, &s, &c.z, c.l1, sqrt_amp));
            let e_f = p1.dot(&beta);
            let t2 = (&p2 * &b).trace();
            let v1 = v.amp - (&kr_inv * &p2).trace();
            let yt = y - v.mean;
            LikelihoodScalars { v1, t2, e_f, quad: (yt * yt - 2.0 * yt * e_f + v1 + t2) / (2.0 * v.noise_var) }
        })
        .collect())
}

/// Mean and variance of `νᵀ[1, W x]` under the entrywise projection posterior.
pub fn boundary_moments(x: &[f64], qw: &ProjectionPosterior, nu: &[f64]) -> (f64, f64) {
    let k = qw.mean.nrows();
    let (mean, var) = (qw.mean.transpose().as_slice().to_vec(), qw.var.transpose().as_slice().to_vec());
    let (m, s) = psi::latent_moments(x, &mean, &var, k);
    let (mu, v) = boundary_terms(&m, &s, nu);
    (mu, v.max(0.0).sqrt())
}

/// `e^{T1} / (e^{T1} + e^{T2})`, stable for any finite gap.
pub fn optimal_rho(t1: f64, t2: f64) -> f64 {
    let d = t1 - t2;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// `KL(q(r) ∥ p(r))` for one region.
pub fn kl_local(li: &LocalInducing) -> Result<f64> {
    let chol = li.prior_factor()?;
    let l1 = li.len();
    let kinv = chol.inverse();
    let sigma = li.post_cov();
    let quad = li.post_mean.dot(&(&kinv * &li.post_mean));
    let logdet_s: f64 = (0..l1).map(|a| li.post_root[(a, a)].powi(2).ln()).sum();
    Ok(0.5 * ((&kinv * sigma).trace() + quad - l1 as f64 + chol.logdet() - logdet_s))
}

/// Per-region ELBO contributions and optimal `ρ`, evaluated in parallel.
pub fn region_contributions(state: &VariationalState, gh: &GaussHermite) -> Result<Vec<(f64, Vec<f64>)>> {
    let terms = GlobalTerms::from_state(&state.global, &state.theta_w);
    let factors = terms.factors()?;
    let results = crate::par::map_range(state.regions.len(), |j| -> Result<(f64, Vec<f64>)> {
        let rs = &state.regions[j];
        let c = RegionConsts::new(rs)?;
        let v = RegionVars::from_state(rs);
        let (mean, var) = terms.qw_moments(&factors, &c.x_star);
        let pts = point_terms(&c, &v, &mean, &var, gh);
        let rho = pts.iter().map(|(a, b)| optimal_rho(*a, *b)).collect();
        let sum: f64 = pts.iter().map(|(a, b)| logaddexp(*a, *b)).sum();
        Ok((sum - kl_local_with(&c, &v), rho))
    });
    results.into_iter().collect()
}

/// The evidence lower bound of `state`.
pub fn elbo(state: &VariationalState) -> Result<f64> {
    let gh = GaussHermite::new(state.config.quadrature_nodes);
    let kl = crate::projection::kl_global(&state.global, &state.theta_w)?;
    let regions = region_contributions(state, &gh)?;
    Ok(regions.iter().map(|r| r.0).sum::<f64>() - kl)
}

#[cfg(test)]
mod tests;

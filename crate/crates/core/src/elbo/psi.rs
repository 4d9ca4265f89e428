//! Ψ-statistics: expectations of the local SE kernel under the Gaussian
//! marginal of the projection.
//!
//! With `z_i = W x_i` and independent entries `W_kd ~ N(M_kd, V_kd)`, each
//! latent coordinate is Gaussian with mean `m_ik = Σ_d M_kd x_id` and variance
//! `s_ik = Σ_d V_kd x_id²`, which is all the closed forms need.

use nalgebra::DMatrix;

use super::LocalInducing;
use crate::autodiff::Real;
use crate::projection::ProjectionPosterior;

/// Latent moments `(m_i, s_i)` (length K each) of one input row.
pub fn latent_moments<T: Real>(x: &[f64], mean: &[T], var: &[T], k: usize) -> (Vec<T>, Vec<T>) {
    let d = x.len();
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let m = (0..k).map(|r| T::dot_cst(&mean[r * d..(r + 1) * d], x)).collect();
    let s = (0..k).map(|r| T::dot_cst(&var[r * d..(r + 1) * d], &x2)).collect();
    (m, s)
}

/// Row `i` of Ψ₁: `amp · Π_k (1+s_k)^{−½} exp(−(m_k − z̃_ℓk)² / (2(1+s_k)))`.
pub fn psi1_row<T: Real>(m: &[T], s: &[T], z: &[f64], l1: usize, amp: T) -> Vec<T> {
    let k = m.len();
    let one_s: Vec<T> = s.iter().map(|v| *v + 1.0).collect();
    let log_norm = T::sum(&one_s.iter().map(|v| v.ln()).collect::<Vec<_>>()) * -0.5;
    (0..l1)
        .map(|l| {
            let q: Vec<T> = (0..k).map(|r| (m[r] - z[l * k + r]).square() / one_s[r]).collect();
            (log_norm - T::sum(&q) * 0.5).exp() * amp
        })
        .collect()
}

/// Ψ₂ for one point (L₁×L₁ row-major):
/// `amp² exp(−¼‖z̃_ℓ − z̃_ℓ′‖²) Π_k (1+2s_k)^{−½} exp(−(m_k − z̄_k)² / (1+2s_k))`.
pub fn psi2_point<T: Real>(m: &[T], s: &[T], z: &[f64], l1: usize, amp: T) -> Vec<T> {
    let k = m.len();
    let two_s: Vec<T> = s.iter().map(|v| *v * 2.0 + 1.0).collect();
    let log_norm = T::sum(&two_s.iter().map(|v| v.ln()).collect::<Vec<_>>()) * -0.5;
    let amp2 = amp.square();
    let mut out = vec![T::cst(0.0); l1 * l1];
    for a in 0..l1 {
        for b in 0..=a {
            let sep: f64 = (0..k).map(|r| (z[a * k + r] - z[b * k + r]).powi(2)).sum();
            let q: Vec<T> =
                (0..k).map(|r| (m[r] - (z[a * k + r] + z[b * k + r]) * 0.5).square() / two_s[r]).collect();
            let v = (log_norm - T::sum(&q) - 0.25 * sep).exp() * amp2;
            out[a * l1 + b] = v;
            out[b * l1 + a] = v;
        }
    }
    out
}

fn flat<'a>(m: &'a DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Ψ₁ (n×L₁) for the rows of `inputs`.
pub fn psi1(inputs: &DMatrix<f64>, qw: &ProjectionPosterior, li: &LocalInducing, amplitude: f64) -> DMatrix<f64> {
    let (mean, var, z) = (flat(&qw.mean), flat(&qw.var), flat(&li.inputs));
    let (n, l1, k) = (inputs.nrows(), li.len(), qw.mean.nrows());
    let mut out = DMatrix::zeros(n, l1);
    for i in 0..n {
        let x: Vec<f64> = inputs.row(i).iter().copied().collect();
        let (m, s) = latent_moments(&x, &mean, &var, k);
        for (l, v) in psi1_row(&m, &s, &z, l1, amplitude).into_iter().enumerate() {
            out[(i, l)] = v;
        }
    }
    out
}

/// Ψ₂ (L₁×L₁) for row `i` of `inputs`.
pub fn psi2(inputs: &DMatrix<f64>, i: usize, qw: &ProjectionPosterior, li: &LocalInducing, amplitude: f64) -> DMatrix<f64> {
    let (mean, var, z) = (flat(&qw.mean), flat(&qw.var), flat(&li.inputs));
    let (l1, k) = (li.len(), qw.mean.nrows());
    let x: Vec<f64> = inputs.row(i).iter().copied().collect();
    let (m, s) = latent_moments(&x, &mean, &var, k);
    DMatrix::from_row_slice(l1, l1, &psi2_point(&m, &s, &z, l1, amplitude))
}

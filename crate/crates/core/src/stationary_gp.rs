//! Stationary GP regression with a constant mean and SE covariance.
//!
//! Hyperparameters are optimized on the unconstrained vector
//! `[μ, ln σ², ln σ_f², ln ℓ_1, …, ln ℓ_D]`.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{mean_var, Dataset};
use crate::error::{Error, Result};
use crate::kernels::{chol_psd, cov_matrix, CholFactor, SeParams};

/// Mean, noise variance and kernel of a stationary GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub mean: f64,
    pub noise_variance: f64,
    pub kernel: SeParams,
}

impl GpHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance > 0.0) || !self.mean.is_finite() {
            return Err(Error::input(format!("invalid GP hyperparameters: {self:?}")));
        }
        self.kernel.validate()
    }

    /// Standard starting point: sample mean, 10%/90% variance split, column spreads.
    pub fn heuristic(data: &Dataset) -> GpHyper {
        let (m, v) = mean_var(data.targets.as_slice());
        let v = v.max(1e-6);
        let lengthscales = data
            .input_std()
            .into_iter()
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        GpHyper {
            mean: m,
            noise_variance: 0.1 * v,
            kernel: SeParams { signal_variance: 0.9 * v, lengthscales },
        }
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut p = vec![self.mean, self.noise_variance.ln(), self.kernel.signal_variance.ln()];
        p.extend(self.kernel.lengthscales.iter().map(|l| l.ln()));
        p
    }

    pub fn from_unconstrained(p: &[f64]) -> GpHyper {
        GpHyper {
            mean: p[0],
            noise_variance: p[1].exp(),
            kernel: SeParams {
                signal_variance: p[2].exp(),
                lengthscales: p[3..].iter().map(|v| v.exp()).collect(),
            },
        }
    }

    /// `σ²I + C_N` over the rows of `inputs`.
    pub fn noisy_cov(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = inputs.nrows();
        cov_matrix(inputs, |a, b| self.kernel.eval(a, b)) + DMatrix::identity(n, n) * self.noise_variance
    }
}

fn check_dims(data: &Dataset, h: &GpHyper) -> Result<()> {
    if data.is_empty() {
        return Err(Error::input("GP needs at least one observation"));
    }
    if data.dim() != h.kernel.dim() {
        return Err(Error::input(format!(
            "data has {} columns, kernel has {} lengthscales",
            data.dim(),
            h.kernel.dim()
        )));
    }
    Ok(())
}

/// Log marginal likelihood of `data` under `h`.
pub fn log_marginal_likelihood(data: &Dataset, h: &GpHyper) -> Result<f64> {
    check_dims(data, h)?;
    h.validate()?;
    let chol = chol_psd(&h.noisy_cov(&data.inputs), 0.0)?;
    Ok(lml_from_chol(data, h, &chol))
}

fn lml_from_chol(data: &Dataset, h: &GpHyper, chol: &CholFactor) -> f64 {
    let n = data.len() as f64;
    let r = data.targets.add_scalar(-h.mean);
    let v = chol.solve_lower(&r);
    -0.5 * v.norm_squared() - 0.5 * chol.logdet() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Log marginal likelihood and its gradient on the unconstrained scale.
pub fn lml_and_grad(data: &Dataset, h: &GpHyper) -> Result<(f64, Vec<f64>)> {
    check_dims(data, h)?;
    let n = data.len();
    let d = data.dim();
    let noiseless = cov_matrix(&data.inputs, |a, b| h.kernel.eval(a, b));
    let k = &noiseless + DMatrix::identity(n, n) * h.noise_variance;
    let chol = chol_psd(&k, 0.0)?;
    let lml = lml_from_chol(data, h, &chol);
    let r = data.targets.add_scalar(-h.mean);
    let alpha = chol.solve(&r);
    let kinv = chol.inverse();
    // W = ααᵀ − K⁻¹; ∂L/∂θ = ½ Σ W ⊙ ∂K/∂θ
    let w = &alpha * alpha.transpose() - &kinv;

    let mut grad = vec![0.0; 3 + d];
    grad[0] = alpha.sum();
    grad[1] = 0.5 * h.noise_variance * w.diagonal().sum();
    grad[2] = 0.5 * w.component_mul(&noiseless).sum();
    for m in 0..d {
        let l2 = h.kernel.lengthscales[m].powi(2);
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..i {
                let dx = data.inputs[(i, m)] - data.inputs[(j, m)];
                acc += 2.0 * w[(i, j)] * noiseless[(i, j)] * dx * dx / l2;
            }
        }
        grad[3 + m] = 0.5 * acc;
    }
    Ok((lml, grad))
}

/// Settings for [`fit_with`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GpFitOptions {
    pub steps: usize,
    pub rate: f64,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions { steps: 300, rate: 0.01 }
    }
}

/// Maximizes the log marginal likelihood by gradient ascent from `init`.
pub fn fit(data: &Dataset, init: &GpHyper, steps: usize) -> Result<GpFit> {
    fit_with(data, init, &GpFitOptions { steps, ..GpFitOptions::default() })
}

pub fn fit_with(data: &Dataset, init: &GpHyper, opts: &GpFitOptions) -> Result<GpFit> {
    let hyper = optimize(data, init, opts)?;
    GpFit::new(data.clone(), hyper)
}

/// Gradient ascent with step halving; never returns a point worse than `init`.
pub fn optimize(data: &Dataset, init: &GpHyper, opts: &GpFitOptions) -> Result<GpHyper> {
    check_dims(data, init)?;
    init.validate()?;
    if opts.steps == 0 {
        return Ok(init.clone());
    }
    let mut theta = init.to_unconstrained();
    let (mut cur, mut grad) = lml_and_grad(data, init)?;
    if !cur.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical(format!("non-finite likelihood at {init:?}")));
    }
    let mut rate = opts.rate;
    for _ in 0..opts.steps {
        let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + rate * g).collect();
        let h = GpHyper::from_unconstrained(&cand);
        match lml_and_grad(data, &h) {
            Ok((v, g)) if v.is_finite() && v >= cur && g.iter().all(|x| x.is_finite()) => {
                theta = cand;
                cur = v;
                grad = g;
            }
            _ => {
                rate *= 0.5;
                if rate < 1e-14 {
                    break;
                }
            }
        }
    }
    Ok(GpHyper::from_unconstrained(&theta))
}

/// A GP conditioned on training data with fixed hyperparameters.
#[derive(Debug)]
pub struct GpFit {
    pub hyper: GpHyper,
    pub train: Dataset,
    pub chol: CholFactor,
    alpha: DVector<f64>,
    clamped: AtomicUsize,
}

impl GpFit {
    pub fn new(train: Dataset, hyper: GpHyper) -> Result<GpFit> {
        check_dims(&train, &hyper)?;
        hyper.validate()?;
        let chol = chol_psd(&hyper.noisy_cov(&train.inputs), 0.0)?;
        let alpha = chol.solve(&train.targets.add_scalar(-hyper.mean));
        Ok(GpFit { hyper, train, chol, alpha, clamped: AtomicUsize::new(0) })
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        lml_from_chol(&self.train, &self.hyper, &self.chol)
    }

    /// Number of predictions whose variance was clamped at zero.
    pub fn clamped_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    fn cross_cov(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.train.len(),
            (0..self.train.len()).map(|i| {
                let row: Vec<f64> = self.train.inputs.row(i).iter().copied().collect();
                self.hyper.kernel.eval(&row, x)
            }),
        )
    }
}

/// Predictive mean and variance of the latent function at `x_star`.
pub fn gp_predict(fit: &GpFit, x_star: &[f64]) -> Result<(f64, f64)> {
    if x_star.len() != fit.train.dim() {
        return Err(Error::input("test point dimension does not match the fit"));
    }
    let c = fit.cross_cov(x_star);
    let mean = fit.hyper.mean + c.dot(&fit.alpha);
    let v = fit.chol.solve_lower(&c);
    let mut var = fit.hyper.kernel.signal_variance - v.norm_squared();
    if var < 0.0 {
        fit.clamped.fetch_add(1, Ordering::Relaxed);
        var = 0.0;
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::SeParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 3.0);
        let y = DVector::from_fn(n, |i, _| (x[(i, 0)] * 2.0).sin() + 0.3 * rng.random::<f64>());
        Dataset::new(x, y).unwrap()
    }

    fn random_hyper(rng: &mut ChaCha8Rng, d: usize) -> GpHyper {
        GpHyper {
            mean: rng.random::<f64>() - 0.5,
            noise_variance: 0.05 + rng.random::<f64>() * 0.3,
            kernel: SeParams {
                signal_variance: 0.5 + rng.random::<f64>(),
                lengthscales: (0..d).map(|_| 0.4 + rng.random::<f64>()).collect(),
            },
        }
    }

    /// Dense-inverse oracle for the log marginal likelihood.
    fn lml_dense(data: &Dataset, h: &GpHyper) -> f64 {
        let k = h.noisy_cov(&data.inputs);
        let kinv = k.clone().try_inverse().unwrap();
        let r = data.targets.add_scalar(-h.mean);
        let quad = (r.transpose() * kinv * &r)[(0, 0)];
        let n = data.len() as f64;
        -0.5 * quad - 0.5 * k.determinant().ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn lml_single_point_at_mean() {
        let data = Dataset::from_rows(&[vec![0.3]], vec![1.5]).unwrap();
        let h = GpHyper {
            mean: 1.5,
            noise_variance: 0.25,
            kernel: SeParams { signal_variance: 0.75, lengthscales: vec![1.0] },
        };
        let v = log_marginal_likelihood(&data, &h).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((v + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn lml_degenerate_kernel_is_independent_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_data(&mut rng, 6, 2);
        let h = GpHyper {
            mean: 0.0,
            noise_variance: 1.0,
            kernel: SeParams { signal_variance: 1e-300, lengthscales: vec![1.0, 1.0] },
        };
        let v = log_marginal_likelihood(&data, &h).unwrap();
        let oracle: f64 = data
            .targets
            .iter()
            .map(|y| -0.5 * y * y - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        assert!((v - oracle).abs() < 1e-10);
    }

    #[test]
    fn lml_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let data = random_data(&mut rng, 3, 2);
            let h = random_hyper(&mut rng, 2);
            let v = log_marginal_likelihood(&data, &h).unwrap();
            assert!((v - lml_dense(&data, &h)).abs() < 1e-8);
        }
    }

    #[test]
    fn lml_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_data(&mut rng, 12, 2);
        let h = random_hyper(&mut rng, 2);
        let perm: Vec<usize> = (0..12).rev().collect();
        let a = log_marginal_likelihood(&data, &h).unwrap();
        let b = log_marginal_likelihood(&data.subset(&perm), &h).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..20 {
            let n = 2 + rng.random_range(0..19);
            let d = 1 + case % 3;
            let data = random_data(&mut rng, n, d);
            let h = random_hyper(&mut rng, d);
            let (_, g) = lml_and_grad(&data, &h).unwrap();
            let theta = h.to_unconstrained();
            let step = 1e-5;
            for p in 0..theta.len() {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[p] += step;
                dn[p] -= step;
                let fd = (log_marginal_likelihood(&data, &GpHyper::from_unconstrained(&up)).unwrap()
                    - log_marginal_likelihood(&data, &GpHyper::from_unconstrained(&dn)).unwrap())
                    / (2.0 * step);
                let tol = 1e-4 * fd.abs().max(g[p].abs()).max(1e-3);
                assert!((g[p] - fd).abs() < tol, "case {case} param {p}: {} vs {fd}", g[p]);
            }
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_data(&mut rng, 8, 1);
        let init = random_hyper(&mut rng, 1);
        let fit = fit(&data, &init, 0).unwrap();
        assert_eq!(fit.hyper, init);
    }

    #[test]
    fn fit_improves_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_data(&mut rng, 30, 2);
        let init = GpHyper::heuristic(&data);
        let before = log_marginal_likelihood(&data, &init).unwrap();
        let fit = fit(&data, &init, 300).unwrap();
        assert!(fit.log_marginal_likelihood() >= before);
    }

    #[test]
    fn constant_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::from_fn(20, 2, |_, _| rng.random::<f64>());
        let data = Dataset::new(x, DVector::from_element(20, 4.2)).unwrap();
        let init = GpHyper::heuristic(&data);
        let fit = fit(&data, &init, 300).unwrap();
        assert!((fit.hyper.mean - 4.2).abs() < 1e-3);
        assert!(fit.hyper.kernel.signal_variance < 1e-3);
    }

    /// Draws from a known GP and checks the recovered lengthscales.
    #[test]
    fn recovers_lengthscales() {
        let truth = [0.8, 2.0];
        let mut errors = Vec::new();
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 200;
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 5.0);
            let h = GpHyper {
                mean: 0.0,
                noise_variance: 0.01,
                kernel: SeParams { signal_variance: 1.0, lengthscales: truth.to_vec() },
            };
            let chol = chol_psd(&h.noisy_cov(&x), 0.0).unwrap();
            let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &chol.l * e;
            let data = Dataset::new(x, y).unwrap();
            let fit = fit(&data, &GpHyper::heuristic(&data), 300).unwrap();
            let rel: f64 = fit
                .hyper
                .kernel
                .lengthscales
                .iter()
                .zip(&truth)
                .map(|(l, t)| ((l - t) / t).abs())
                .fold(0.0, f64::max);
            errors.push(rel);
        }
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = 0.5 * (errors[4] + errors[5]);
        assert!(median < 0.5, "median relative error {median}, all {errors:?}");
    }

    #[test]
    fn predict_interpolates_training_point() {
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0], vec![2.5]], vec![1.0, -2.0, 0.5]).unwrap();
        let h = GpHyper {
            mean: 0.0,
            noise_variance: 1e-10,
            kernel: SeParams { signal_variance: 1.0, lengthscales: vec![0.7] },
        };
        let fit = GpFit::new(data, h).unwrap();
        let (m, _) = gp_predict(&fit, &[1.0]).unwrap();
        assert!((m + 2.0).abs() < 1e-4);
    }

    #[test]
    fn predict_reverts_to_prior_far_away() {
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0]], vec![3.0, 5.0]).unwrap();
        let h = GpHyper {
            mean: 1.0,
            noise_variance: 0.1,
            kernel: SeParams { signal_variance: 2.0, lengthscales: vec![0.5] },
        };
        let fit = GpFit::new(data, h).unwrap();
        let (m, v) = gp_predict(&fit, &[100.0]).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let data = Dataset::from_rows(&[vec![0.2, 1.0], vec![0.9, 0.4]], vec![1.3, -0.4]).unwrap();
        let h = GpHyper {
            mean: 0.2,
            noise_variance: 0.3,
            kernel: SeParams { signal_variance: 1.5, lengthscales: vec![0.8, 1.2] },
        };
        let xs = [0.5, 0.5];
        let fit = GpFit::new(data.clone(), h.clone()).unwrap();
        let (m, v) = gp_predict(&fit, &xs).unwrap();

        let kinv = h.noisy_cov(&data.inputs).try_inverse().unwrap();
        let c = DVector::from_vec(vec![h.kernel.eval(&[0.2, 1.0], &xs), h.kernel.eval(&[0.9, 0.4], &xs)]);
        let r = data.targets.add_scalar(-0.2);
        let m_oracle = 0.2 + (c.transpose() * &kinv * r)[(0, 0)];
        let v_oracle = 1.5 - (c.transpose() * &kinv * &c)[(0, 0)];
        assert!((m - m_oracle).abs() < 1e-10);
        assert!((v - v_oracle).abs() < 1e-10);
    }

    #[test]
    fn predictive_variance_bounded_by_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = random_data(&mut rng, 15, 2);
        let h = random_hyper(&mut rng, 2);
        let fit = GpFit::new(data, h.clone()).unwrap();
        for _ in 0..50 {
            let x = [rng.random::<f64>() * 4.0 - 0.5, rng.random::<f64>() * 4.0 - 0.5];
            let (_, v) = gp_predict(&fit, &x).unwrap();
            assert!(v >= 0.0 && v <= h.kernel.signal_variance + 1e-10);
        }
    }
}

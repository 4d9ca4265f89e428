//! Gauss–Hermite rule for Gaussian expectations of the log-sigmoid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, Real};

/// Default node count. Worst-case error of `E[log σ(z)]` over `μ ∈ [-5, 5]`,
/// `σ ∈ [0, 3]` is about 3e-7 at 48 nodes (8e-5 at 20).
pub const DEFAULT_NODES: usize = 48;

/// Nodes and weights for `∫ e^{-x²} f(x) dx ≈ Σ w_t f(x_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Roots of the physicists' Hermite polynomial by Newton iteration on the
    /// orthonormal recurrence.
    pub fn new(n: usize) -> GaussHermite {
        assert!(n > 0, "Gauss-Hermite rule needs at least one node");
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        GaussHermite { nodes: x, weights: w }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[f(Z)]` for `Z ~ N(μ, σ²)`.
    pub fn expect<T: Real, F: Fn(T) -> T>(&self, mu: T, sigma: T, f: F) -> T {
        let s = sigma * std::f64::consts::SQRT_2;
        let terms: Vec<T> = self.nodes.iter().map(|&x| f(mu + s * x)).collect();
        T::dot_cst(&terms, &self.weights) * (1.0 / std::f64::consts::PI.sqrt())
    }
}

impl Default for GaussHermite {
    fn default() -> Self {
        GaussHermite::new(DEFAULT_NODES)
    }
}

/// `(E[log σ(Z)], E[log(1 − σ(Z))])` for `Z ~ N(μ, σ²)`; exact when `σ = 0`.
///
/// The second entry uses `log(1 − σ(z)) = log σ(z) − z`.
pub fn expected_log_sigmoid<T: Real>(mu: T, sigma: T, gh: &GaussHermite) -> (T, T) {
    let e = if sigma.value() == 0.0 { log_sigmoid(mu) } else { gh.expect(mu, sigma, log_sigmoid) };
    (e, e - mu)
}

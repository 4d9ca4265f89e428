//! Dense linear algebra over [`Real`] scalars on row-major slices.
//!
//! These routines back every covariance factorization so that the same code
//! path runs under plain evaluation and under the gradient tape.

use crate::autodiff::Real;

/// Relative jitter levels tried, in order, by [`jitter_cholesky`].
pub const JITTER_SCHEDULE: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

/// Pivots at or below this fraction of the mean diagonal count as failure.
const PIVOT_FLOOR: f64 = 1e-14;

/// Lower Cholesky factor of `a + jitter·I` (n×n, row-major), or `None` if a
/// pivot is not safely positive.
pub fn cholesky<T: Real>(a: &[T], n: usize, jitter: f64) -> Option<Vec<T>> {
    debug_assert_eq!(a.len(), n * n);
    let scale = mean_diag(a, n).abs().max(f64::MIN_POSITIVE);
    let mut l = vec![T::cst(0.0); n * n];
    for j in 0..n {
        let row_j = &l[j * n..j * n + j];
        let d = a[j * n + j] + jitter - T::dot(row_j, row_j);
        let dv = d.value();
        if !(dv > PIVOT_FLOOR * scale) || !dv.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let s = a[i * n + j] - T::dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

pub fn mean_diag<T: Real>(a: &[T], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| a[i * n + i].value()).sum::<f64>() / n as f64
}

/// Cholesky with the escalating jitter schedule `δ ∈ {0, 1e-8, 1e-6, 1e-4}·mean(diag)`.
///
/// Returns the factor and the absolute jitter used, or the largest jitter tried.
pub fn jitter_cholesky<T: Real>(a: &[T], n: usize) -> Result<(Vec<T>, f64), f64> {
    let md = mean_diag(a, n).abs();
    let mut last = 0.0;
    for rel in JITTER_SCHEDULE {
        let delta = rel * md;
        last = delta;
        if let Some(l) = cholesky(a, n, delta) {
            return Ok((l, delta));
        }
    }
    Err(last)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_solve<T: Real>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let mut x: Vec<T> = Vec::with_capacity(n);
    for i in 0..n {
        let s = b[i] - T::dot(&l[i * n..i * n + i], &x[..i]);
        x.push(s / l[i * n + i]);
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn backward_solve_t<T: Real>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let mut x = vec![T::cst(0.0); n];
    let mut col = Vec::with_capacity(n);
    for i in (0..n).rev() {
        col.clear();
        col.extend((i + 1..n).map(|k| l[k * n + i]));
        let s = b[i] - T::dot(&col, &x[i + 1..]);
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solves `(L Lᵀ) x = b`.
pub fn chol_solve<T: Real>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let y = forward_solve(l, n, b);
    backward_solve_t(l, n, &y)
}

/// `log |L Lᵀ|`.
pub fn chol_logdet<T: Real>(l: &[T], n: usize) -> T {
    let logs: Vec<T> = (0..n).map(|i| l[i * n + i].ln()).collect();
    T::sum(&logs) * 2.0
}

/// `L⁻¹` (lower-triangular, row-major).
pub fn tri_inverse<T: Real>(l: &[T], n: usize) -> Vec<T> {
    let mut inv = vec![T::cst(0.0); n * n];
    let mut e = vec![T::cst(0.0); n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = T::cst(0.0));
        e[c] = T::cst(1.0);
        let x = forward_solve(l, n, &e);
        for r in c..n {
            inv[r * n + c] = x[r];
        }
    }
    inv
}

/// `(L Lᵀ)⁻¹` as a full symmetric matrix.
pub fn chol_inverse<T: Real>(l: &[T], n: usize) -> Vec<T> {
    let li = tri_inverse(l, n);
    let mut out = vec![T::cst(0.0); n * n];
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..=i {
            // (L⁻ᵀ L⁻¹)_{ij} = Σ_k Li_{ki} Li_{kj}, k ≥ max(i, j)
            a.clear();
            b.clear();
            for k in i..n {
                a.push(li[k * n + i]);
                b.push(li[k * n + j]);
            }
            let v = T::dot(&a, &b);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] = (0..n).map(|k| a[i * n + k] * b[k * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn solves_and_inverse_agree() {
        let n = 3;
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let l = cholesky(&a, n, 0.0).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = chol_solve(&l, n, &b);
        for i in 0..n {
            let r: f64 = (0..n).map(|k| a[i * n + k] * x[k]).sum();
            assert!((r - b[i]).abs() < 1e-12);
        }
        let inv = chol_inverse(&l, n);
        let eye = matmul(&a, &inv, n);
        for i in 0..n {
            for j in 0..n {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((eye[i * n + j] - e).abs() < 1e-12);
            }
        }
        let det = 4.0 * (3.0 * 2.0 - 0.04) - 1.0 * (2.0 - 0.1) + 0.5 * (0.2 - 1.5);
        assert!((chol_logdet(&l, n) - f64::ln(det)).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_needs_jitter() {
        let a = [1.0, 1.0, 1.0, 1.0];
        assert!(cholesky(&a, 2, 0.0).is_none());
        let (_, delta) = jitter_cholesky(&a, 2).unwrap();
        assert!(delta > 0.0);
    }

    #[test]
    fn indefinite_matrix_fails_at_max_jitter() {
        let a = [1.0, 0.0, 0.0, -1.0];
        let err = jitter_cholesky(&a, 2).unwrap_err();
        assert_eq!(err, 0.0); // mean diagonal is zero
        let b = [1.0, 2.0, 2.0, 1.0];
        let err = jitter_cholesky(&b, 2).unwrap_err();
        assert!((err - 1e-4).abs() < 1e-18);
    }
}

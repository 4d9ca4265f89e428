//! Point and probabilistic scores, and roughness statistics of a dataset.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::sq_dist;
use crate::par;

pub const DEFAULT_KNN: usize = 6;
const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointScore {
    pub mean: f64,
    pub variance: f64,
    pub target: f64,
    pub crps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rmse: f64,
    pub mean_crps: f64,
    pub per_point: Vec<PointScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoughnessReport {
    pub g_avg: f64,
    pub g_max: f64,
    pub tv2: f64,
    pub knn_k: usize,
    /// Edges dropped because both endpoints share the same inputs.
    pub skipped_duplicates: usize,
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::input(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(Error::input("rmse of an empty set"));
    }
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// CRPS of `N(mu, variance)` against the observation `y`.
pub fn crps_gaussian(mu: f64, variance: f64, y: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::input(format!("CRPS needs a positive variance, got {variance}")));
    }
    let sigma = variance.sqrt();
    let z = (y - mu) / sigma;
    let n = Normal::standard();
    Ok(sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / PI.sqrt()))
}

/// Scores `(mean, variance)` predictions against targets.
pub fn score(preds: &[(f64, f64)], targets: &[f64]) -> Result<ScoreReport> {
    let means: Vec<f64> = preds.iter().map(|p| p.0).collect();
    let rmse = rmse(&means, targets)?;
    let per_point = preds
        .iter()
        .zip(targets)
        .map(|(&(mean, variance), &target)| {
            Ok(PointScore { mean, variance, target, crps: crps_gaussian(mean, variance, target)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_crps = per_point.iter().map(|p| p.crps).sum::<f64>() / per_point.len() as f64;
    Ok(ScoreReport { rmse, mean_crps, per_point })
}

/// Indices of the `k` nearest other rows, ties broken by lower index.
fn knn(rows: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    par::map_range(rows.len(), |i| {
        let mut d: Vec<(f64, usize)> =
            (0..rows.len()).filter(|&j| j != i).map(|j| (sq_dist(&rows[i], &rows[j]), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|p| p.1).collect()
    })
}

/// Leading eigenvector of the sample covariance by power iteration, largest
/// loading made positive.
pub fn first_principal_component(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
            }
        }
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    for _ in 0..PCA_MAX_ITERS {
        let mut next: Vec<f64> = cov.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }
    let lead = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Local gradient magnitudes over the symmetrized k-NN graph and second-order
/// total variation along the first principal component.
pub fn roughness(data: &Dataset, k: usize) -> Result<RoughnessReport> {
    if data.len() < 3 {
        return Err(Error::input("roughness needs at least 3 rows"));
    }
    if k == 0 {
        return Err(Error::input("roughness needs k >= 1"));
    }
    let rows = data.rows();
    let y = data.targets.as_slice();
    let mut edges = BTreeSet::new();
    for (i, nb) in knn(&rows, k).into_iter().enumerate() {
        for j in nb {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let mut skipped = 0;
    let mut grads = Vec::with_capacity(edges.len());
    for (i, j) in edges {
        let dist = sq_dist(&rows[i], &rows[j]).sqrt();
        if dist == 0.0 {
            skipped += 1;
            continue;
        }
        grads.push((y[i] - y[j]).abs() / dist);
    }
    let (g_avg, g_max) = if grads.is_empty() {
        (0.0, 0.0)
    } else {
        (grads.iter().sum::<f64>() / grads.len() as f64, grads.iter().copied().fold(0.0, f64::max))
    };

    let pc = first_principal_component(&rows);
    let mut order: Vec<(f64, usize)> =
        rows.iter().enumerate().map(|(i, r)| (r.iter().zip(&pc).map(|(a, b)| a * b).sum(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let ys: Vec<f64> = order.iter().map(|o| y[o.1]).collect();
    let tv2 = ys.windows(3).map(|w| ((w[2] - w[1]) - (w[1] - w[0])).abs()).sum();
    Ok(RoughnessReport { g_avg, g_max, tv2, knn_k: k, skipped_duplicates: skipped })
}

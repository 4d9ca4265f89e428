//! Two-stage prediction: draw projections from `q(W_j)`, refit a jump GP on
//! each projected neighborhood, and pool the per-draw predictive moments.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::elbo::VariationalState;
use crate::error::{Error, Result};
use crate::jump_gp::{fit_jgp, jgp_predict, local_gp_predict, select_neighborhood, JgpConfig, LocalRegion};
use crate::projection::{qw_moments, sample_w, ProjectionPosterior};
use crate::{par, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub variance: f64,
    /// `(mean, variance)` of every successful draw.
    pub per_sample: Vec<(f64, f64)>,
}

/// Moment-matched mixture of equally weighted Gaussian draws.
pub fn aggregate(samples: &[(f64, f64)]) -> Result<PredictiveDistribution> {
    if samples.is_empty() {
        return Err(Error::numerical("no predictive samples to aggregate"));
    }
    if samples.len() == 1 {
        let (m, v) = samples[0];
        return Ok(PredictiveDistribution { mean: m, variance: v, per_sample: samples.to_vec() });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let variance = samples.iter().map(|(m, v)| v + (m - mean).powi(2)).sum::<f64>() / n;
    Ok(PredictiveDistribution { mean, variance, per_sample: samples.to_vec() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub samples: usize,
    pub jgp: JgpConfig,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { samples: 5, jgp: JgpConfig::default() }
    }
}

/// Neighborhood with inputs mapped to `W (x − x*)`, so the test point sits at the origin.
pub fn project_region(region: &LocalRegion, w: &DMatrix<f64>) -> LocalRegion {
    let x_star = region.x_star.clone();
    let mut out = region.map_inputs(|x| {
        let c: Vec<f64> = x.iter().zip(&x_star).map(|(a, b)| a - b).collect();
        (w * nalgebra::DVector::from_vec(c)).iter().copied().collect()
    });
    out.x_star = vec![0.0; w.nrows()];
    out
}

fn predict_region(
    region: &LocalRegion,
    qw: &ProjectionPosterior,
    cfg: &PredictConfig,
    seed: u64,
    index: usize,
) -> Result<PredictiveDistribution> {
    if cfg.samples == 0 {
        return Err(Error::input("at least one Monte Carlo sample is required"));
    }
    let mut samples = Vec::with_capacity(cfg.samples);
    for m in 0..cfg.samples {
        let mut r = rng::stream(seed, index as u64, m as u64);
        let mut last = None;
        for _attempt in 0..2 {
            let w = sample_w(qw, &mut r);
            let projected = project_region(region, &w);
            match fit_jgp(&projected, &cfg.jgp).and_then(|fit| jgp_predict(&fit, &projected)) {
                Ok(p) => {
                    last = None;
                    samples.push(p);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        if let Some(e) = last {
            log::warn!("test point {index}, sample {m}: jump GP fit failed twice ({e}); skipping");
        }
    }
    aggregate(&samples).map_err(|_| Error::numerical(format!("test point {index}: every Monte Carlo sample failed")))
}

/// Prediction for training region `j` of `state`.
pub fn djgp_predict_one(state: &VariationalState, j: usize, cfg: &PredictConfig, seed: u64) -> Result<PredictiveDistribution> {
    let rs = state.regions.get(j).ok_or_else(|| Error::input(format!("no region {j}")))?;
    let qw = qw_moments(&state.global, &state.theta_w, &rs.region.x_star)?;
    predict_region(&rs.region, &qw, cfg, seed, j)
}

/// Predictions at every row of `test_points`, in order.
///
/// Rows that coincide with a trained region reuse its neighborhood; other rows
/// get a fresh neighborhood of the same size from the stored training data.
pub fn djgp_predict_all(
    state: &VariationalState,
    test_points: &DMatrix<f64>,
    cfg: &PredictConfig,
    seed: u64,
) -> Result<Vec<PredictiveDistribution>> {
    if test_points.ncols() != state.global.dim() {
        return Err(Error::input(format!(
            "test points have {} columns but the model expects {}",
            test_points.ncols(),
            state.global.dim()
        )));
    }
    let n = state.regions.first().map(|r| r.region.len());
    let results = par::map_range(test_points.nrows(), |t| -> Result<PredictiveDistribution> {
        let x: Vec<f64> = test_points.row(t).iter().copied().collect();
        let region = match state.regions.iter().find(|r| r.region.x_star == x) {
            Some(rs) => rs.region.clone(),
            None => {
                let n = n.ok_or_else(|| Error::input("model has no regions to size a neighborhood"))?;
                select_neighborhood(&state.train_data, &x, n)?
            }
        };
        let qw = qw_moments(&state.global, &state.theta_w, &x)?;
        predict_region(&region, &qw, cfg, seed, t)
    });
    let mut out = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => out.push(p),
            Err(e) => errors.push(format!("test point {t}: {e}")),
        }
    }
    if let Some(first) = errors.first() {
        return Err(Error::numerical(format!("{} prediction(s) failed; {first}", errors.len())));
    }
    Ok(out)
}

/// Jump GP on the raw-input neighborhood of each test point.
pub fn jgp_baseline(train: &Dataset, test_points: &DMatrix<f64>, n: usize, cfg: &JgpConfig) -> Result<Vec<(f64, f64)>> {
    par::map_range(test_points.nrows(), |t| {
        let x: Vec<f64> = test_points.row(t).iter().copied().collect();
        let region = select_neighborhood(train, &x, n)?;
        jgp_predict(&fit_jgp(&region, cfg)?, &region)
    })
    .into_iter()
    .collect()
}

/// Stationary GP on the raw-input neighborhood of each test point.
pub fn local_gp_baseline(train: &Dataset, test_points: &DMatrix<f64>, n: usize, gp_steps: usize) -> Result<Vec<(f64, f64)>> {
    par::map_range(test_points.nrows(), |t| {
        let x: Vec<f64> = test_points.row(t).iter().copied().collect();
        local_gp_predict(&select_neighborhood(train, &x, n)?, gp_steps)
    })
    .into_iter()
    .collect()
}

//! Transductive jump GP with a linear partition boundary.
//!
//! For one test location the `n` nearest training points are split into an
//! in-regime set, modeled by a stationary GP, and an out-of-regime set, given a
//! flat density `1/u` over the local response range. A logistic model on the
//! (centered) inputs acts as the prior on membership. Labels and parameters are
//! fitted by classification EM.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::log_sigmoid;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{chol_psd, sq_dist};
use crate::stationary_gp::{self, gp_predict, GpFit, GpFitOptions, GpHyper};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Test location plus its nearest training rows, sorted by distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalRegion {
    pub x_star: Vec<f64>,
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    /// Row indices into the training pool.
    pub indices: Vec<usize>,
}

impl LocalRegion {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Same region with inputs (and test point) mapped through `f`.
    pub fn map_inputs<F>(&self, f: F) -> LocalRegion
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let rows: Vec<Vec<f64>> = (0..self.len())
            .map(|i| f(&self.inputs.row(i).iter().copied().collect::<Vec<_>>()))
            .collect();
        let d = rows.first().map_or(0, |r| r.len());
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        LocalRegion {
            x_star: f(&self.x_star),
            inputs: DMatrix::from_row_slice(self.len(), d, &flat),
            targets: self.targets.clone(),
            indices: self.indices.clone(),
        }
    }

    fn dataset(&self, members: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(members),
            targets: DVector::from_iterator(members.len(), members.iter().map(|&i| self.targets[i])),
        }
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.inputs.row(i).iter().copied().collect()
    }
}

/// The `n` training rows nearest to `x_star` (Euclidean), ties by lower index.
pub fn select_neighborhood(data: &Dataset, x_star: &[f64], n: usize) -> Result<LocalRegion> {
    if n > data.len() {
        return Err(Error::input(format!("neighborhood of {n} from {} rows", data.len())));
    }
    if x_star.len() != data.dim() {
        return Err(Error::input("test point dimension does not match the data"));
    }
    let mut order: Vec<(f64, usize)> = (0..data.len())
        .map(|i| (sq_dist(&data.row(i), x_star), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let indices: Vec<usize> = order[..n].iter().map(|p| p.1).collect();
    let sub = data.subset(&indices);
    Ok(LocalRegion { x_star: x_star.to_vec(), inputs: sub.inputs, targets: sub.targets, indices })
}

/// Classification-EM settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JgpConfig {
    pub max_iters: usize,
    /// Gradient steps for the in-regime GP per M-step (warm started).
    pub gp_steps: usize,
    pub gp_rate: f64,
    /// Newton steps on the boundary per M-step.
    pub boundary_steps: usize,
    /// Ridge weight on the non-intercept boundary coefficients (standardized inputs).
    pub boundary_ridge: f64,
    /// Restart EM from the all-in labeling and from flipped labelings; see [`fit_jgp`].
    #[serde(default)]
    pub all_in_restart: bool,
}

impl Default for JgpConfig {
    fn default() -> Self {
        JgpConfig { max_iters: 25, gp_steps: 40, gp_rate: 0.01, boundary_steps: 5, boundary_ridge: 0.1, all_in_restart: true }
    }
}

/// Result of [`fit_jgp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JgpFit {
    /// `ν` in intercept-first layout acting on `[1, x]` in the region's input coordinates.
    pub boundary: Vec<f64>,
    /// MAP membership labels (1 = same regime as the test point).
    pub indicators: Vec<f64>,
    pub local_gp: GpHyper,
    pub outlier_level: f64,
    /// Set when the in-regime set had to be repaired with forced points.
    pub collapsed: bool,
    pub iterations: usize,
    /// Penalized log-joint after initialization and after each EM iteration.
    pub log_joint_trace: Vec<f64>,
}

impl JgpFit {
    pub fn in_region(&self) -> Vec<usize> {
        self.indicators.iter().enumerate().filter(|(_, v)| **v >= 0.5).map(|(i, _)| i).collect()
    }
}

/// Standardized, test-centered boundary features `[1, (x − x*)/scale]`.
struct Features {
    rows: Vec<Vec<f64>>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Features {
    fn new(region: &LocalRegion) -> Features {
        let n = region.len();
        let d = region.dim();
        let scale: Vec<f64> = (0..d)
            .map(|c| {
                let col = region.inputs.column(c);
                let m = col.mean();
                let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        let center = region.x_star.clone();
        let rows = (0..n)
            .map(|i| {
                let mut r = Vec::with_capacity(d + 1);
                r.push(1.0);
                r.extend((0..d).map(|c| (region.inputs[(i, c)] - center[c]) / scale[c]));
                r
            })
            .collect();
        Features { rows, center, scale }
    }

    fn logits(&self, nu: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().zip(nu).map(|(a, b)| a * b).sum()).collect()
    }

    /// Boundary expressed on raw coordinates `[1, x]`.
    fn to_raw(&self, nu: &[f64]) -> Vec<f64> {
        let mut raw = vec![nu[0]];
        for (c, (&w, s)) in nu[1..].iter().zip(&self.scale).enumerate() {
            raw[0] -= w * self.center[c] / s;
            raw.push(w / s);
        }
        raw
    }
}

fn boundary_objective(feats: &Features, nu: &[f64], labels: &[bool], ridge: f64) -> f64 {
    let lp: f64 = feats
        .logits(nu)
        .iter()
        .zip(labels)
        .map(|(&h, &v)| if v { log_sigmoid(h) } else { log_sigmoid(-h) })
        .sum();
    lp - 0.5 * ridge * nu[1..].iter().map(|w| w * w).sum::<f64>()
}

/// Ridge-penalized logistic regression by damped Newton steps.
fn refit_boundary(feats: &Features, nu: &mut Vec<f64>, labels: &[bool], ridge: f64, steps: usize) {
    let p = nu.len();
    let mut cur = boundary_objective(feats, nu, labels, ridge);
    for _ in 0..steps {
        let h = feats.logits(nu);
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for ((row, &hi), &v) in feats.rows.iter().zip(&h).zip(labels) {
            let pi = 1.0 / (1.0 + (-hi).exp());
            let r = if v { 1.0 } else { 0.0 } - pi;
            let w = pi * (1.0 - pi);
            for a in 0..p {
                grad[a] += r * row[a];
                for b in 0..p {
                    hess[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 1..p {
            grad[a] -= ridge * nu[a];
            hess[(a, a)] += ridge;
        }
        hess[(0, 0)] += 1e-8;
        let Some(step) = hess.cholesky().map(|c| c.solve(&grad)) else { break };
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-6 {
            let cand: Vec<f64> = nu.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let v = boundary_objective(feats, &cand, labels, ridge);
            if v >= cur {
                improved = v > cur;
                *nu = cand;
                cur = v;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
}

fn members(labels: &[bool]) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect()
}

struct EmState<'a> {
    region: &'a LocalRegion,
    feats: Features,
    log_u: f64,
    ridge: f64,
}

impl EmState<'_> {
    /// Penalized log-joint: GP evidence of the in-set, flat density for the rest,
    /// logistic prior on the labels.
    fn log_joint(&self, labels: &[bool], hyper: &GpHyper, nu: &[f64]) -> Result<f64> {
        let inside = members(labels);
        let lml = stationary_gp::log_marginal_likelihood(&self.region.dataset(&inside), hyper)?;
        let n_out = labels.len() - inside.len();
        Ok(lml - n_out as f64 * self.log_u + boundary_objective(&self.feats, nu, labels, self.ridge))
    }

    /// Per-point log-odds of membership given the current in-set.
    fn scores(&self, labels: &[bool], hyper: &GpHyper, nu: &[f64]) -> Result<Vec<f64>> {
        let inside = members(labels);
        let sub = self.region.dataset(&inside);
        let chol = chol_psd(&hyper.noisy_cov(&sub.inputs), 0.0)?;
        let pinv = chol.inverse();
        let alpha = &pinv * sub.targets.add_scalar(-hyper.mean);
        let mut pos = vec![usize::MAX; labels.len()];
        for (k, &i) in inside.iter().enumerate() {
            pos[i] = k;
        }
        let logits = self.feats.logits(nu);
        let out = (0..labels.len())
            .map(|i| {
                let y = self.region.targets[i];
                let (m, s) = if labels[i] {
                    // leave-one-out predictive
                    let k = pos[i];
                    let pkk = pinv[(k, k)];
                    (y - alpha[k] / pkk, 1.0 / pkk)
                } else {
                    let xi = self.region.row(i);
                    let c = DVector::from_iterator(
                        inside.len(),
                        inside.iter().map(|&j| hyper.kernel.eval(&self.region.row(j), &xi)),
                    );
                    let m = hyper.mean + c.dot(&alpha);
                    let s = hyper.kernel.signal_variance + hyper.noise_variance - (c.transpose() * &pinv * &c)[(0, 0)];
                    (m, s.max(1e-12))
                };
                let log_in = -0.5 * (LN_2PI + s.ln() + (y - m).powi(2) / s) + log_sigmoid(logits[i]);
                let log_out = -self.log_u + log_sigmoid(-logits[i]);
                log_in - log_out
            })
            .collect();
        Ok(out)
    }
}

/// Membership labels from one simultaneous E-step (score ≥ 0 ⇒ in-regime).
pub fn classify(region: &LocalRegion, labels: &[bool], hyper: &GpHyper, nu_std: &[f64], outlier_level: f64) -> Result<Vec<bool>> {
    let st = EmState { region, feats: Features::new(region), log_u: outlier_level.ln(), ridge: 0.0 };
    Ok(st.scores(labels, hyper, nu_std)?.into_iter().map(|s| s >= 0.0).collect())
}

/// Flat outlier density width: the local response range, floored at 1e-6.
pub fn outlier_level(region: &LocalRegion) -> f64 {
    let max = region.targets.max();
    let min = region.targets.min();
    (max - min).max(1e-6)
}

/// Fits a jump GP to `region` by classification EM.
pub fn fit_jgp(region: &LocalRegion, config: &JgpConfig) -> Result<JgpFit> {
    let n = region.len();
    if n < 2 {
        return Err(Error::input("a jump GP region needs at least two points"));
    }
    let u = outlier_level(region);
    let st = EmState { region, feats: Features::new(region), log_u: u.ln(), ridge: config.boundary_ridge };
    let d = region.dim();

    // rows are sorted by distance, so the first ⌈n/2⌉ are the nearest
    let n_init = n.div_ceil(2).max(2);
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_init).collect();
    let mut nu = vec![0.0; d + 1];
    nu[0] = 0.1;
    let mut hyper = GpHyper::heuristic(&region.dataset(&members(&labels)));
    let gp_opts = GpFitOptions { steps: config.gp_steps, rate: config.gp_rate };

    // A constant response has nothing to partition; the flat density would
    // otherwise dominate through the degenerate range.
    if region.targets.max() - region.targets.min() <= 1e-12 * (1.0 + region.targets.amax()) {
        labels = vec![true; n];
        let data = region.dataset(&members(&labels));
        hyper = stationary_gp::optimize(&data, &GpHyper::heuristic(&data), &gp_opts)?;
        return Ok(JgpFit {
            boundary: st.feats.to_raw(&nu),
            indicators: vec![1.0; n],
            log_joint_trace: vec![st.log_joint(&labels, &hyper, &nu)?],
            local_gp: hyper,
            outlier_level: u,
            collapsed: false,
            iterations: 0,
        });
    }

    let nearest = em(&st, labels, hyper, nu, config)?;
    if !config.all_in_restart || config.max_iters == 0 {
        return Ok(nearest);
    }
    // Extra starts: the no-jump labeling, and the complement of any fit whose
    // boundary puts x* on the out-of-regime side. Fits that keep x* inside win,
    // then the higher joint.
    let start = |labels: Vec<bool>| -> Result<JgpFit> {
        let data = region.dataset(&members(&labels));
        let mut nu0 = vec![0.0; d + 1];
        nu0[0] = 0.1;
        em(&st, labels, GpHyper::heuristic(&data), nu0, config)
    };
    let mut fits = vec![nearest, start(vec![true; n])?];
    for i in 0..fits.len() {
        if x_star_logit(&fits[i], region) < 0.0 {
            let flipped: Vec<bool> = fits[i].indicators.iter().map(|v| *v < 0.5).collect();
            if members(&flipped).len() >= 2 {
                fits.push(start(flipped)?);
            }
        }
    }
    let key = |f: &JgpFit| (x_star_logit(f, region) >= 0.0, *f.log_joint_trace.last().expect("nonempty trace"));
    let mut best = fits.remove(0);
    for f in fits {
        let (a, b) = (key(&f), key(&best));
        if a.0 && !b.0 || a.0 == b.0 && a.1 > b.1 {
            best = f;
        }
    }
    Ok(best)
}

/// Boundary logit at the test location.
fn x_star_logit(fit: &JgpFit, region: &LocalRegion) -> f64 {
    fit.boundary[0] + fit.boundary[1..].iter().zip(&region.x_star).map(|(a, b)| a * b).sum::<f64>()
}

/// Classification EM from the given labels and parameters.
fn em(st: &EmState, mut labels: Vec<bool>, mut hyper: GpHyper, mut nu: Vec<f64>, config: &JgpConfig) -> Result<JgpFit> {
    let region = st.region;
    let n = region.len();
    let mut collapsed = false;
    let gp_opts = GpFitOptions { steps: config.gp_steps, rate: config.gp_rate };
    let mut trace = vec![st.log_joint(&labels, &hyper, &nu)?];

    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        // M-step
        hyper = stationary_gp::optimize(&region.dataset(&members(&labels)), &hyper, &gp_opts)?;
        refit_boundary(&st.feats, &mut nu, &labels, config.boundary_ridge, config.boundary_steps);
        let current = st.log_joint(&labels, &hyper, &nu)?;

        // E-step: simultaneous MAP update, falling back to greedy single flips
        let scores = st.scores(&labels, &hyper, &nu)?;
        let mut proposal: Vec<bool> = scores.iter().map(|s| *s >= 0.0).collect();
        if members(&proposal).len() < 2 {
            collapsed = true;
            for flag in proposal.iter_mut().take(2) {
                *flag = true;
            }
        }
        let mut next = labels.clone();
        let mut best = current;
        if proposal != labels {
            let v = st.log_joint(&proposal, &hyper, &nu)?;
            if v >= current {
                next = proposal;
                best = v;
            } else {
                for i in 0..n {
                    if proposal[i] == next[i] {
                        continue;
                    }
                    let mut cand = next.clone();
                    cand[i] = proposal[i];
                    if members(&cand).len() < 2 {
                        continue;
                    }
                    let v = st.log_joint(&cand, &hyper, &nu)?;
                    if v > best {
                        next = cand;
                        best = v;
                    }
                }
            }
        }
        trace.push(best);
        if next == labels {
            break;
        }
        labels = next;
        if iterations == config.max_iters {
            hyper = stationary_gp::optimize(&region.dataset(&members(&labels)), &hyper, &gp_opts)?;
            trace.push(st.log_joint(&labels, &hyper, &nu)?);
        }
    }

    Ok(JgpFit {
        boundary: st.feats.to_raw(&nu),
        indicators: labels.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        local_gp: hyper,
        outlier_level: st.log_u.exp(),
        collapsed,
        iterations,
        log_joint_trace: trace,
    })
}

/// GP predictive at the test point from the in-regime subset only.
pub fn jgp_predict(fit: &JgpFit, region: &LocalRegion) -> Result<(f64, f64)> {
    let inside = fit.in_region();
    if inside.is_empty() {
        return Err(Error::numerical("jump GP fit has an empty in-regime set"));
    }
    let gp = GpFit::new(region.dataset(&inside), fit.local_gp.clone())?;
    gp_predict(&gp, &region.x_star)
}

/// Plain local GP on the whole neighborhood (the no-jump baseline).
pub fn local_gp_predict(region: &LocalRegion, gp_steps: usize) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..region.len()).collect();
    let data = region.dataset(&all);
    let fit = stationary_gp::fit(&data, &GpHyper::heuristic(&data), gp_steps)?;
    gp_predict(&fit, &region.x_star)
}

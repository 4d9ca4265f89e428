//! Initialization and gradient-based maximization of the bound.
//!
//! Gradients come from reverse-mode differentiation split in two levels. A
//! core tape records the global parameters up to the Cholesky factors of
//! `K_RR^(k)` and the global KL. Every region then records its own tape whose
//! leaves are the global parameters, the factor entries, and the region's
//! local parameters. Region adjoints on the factor entries are summed and
//! pulled back through the core tape in one sweep. Regions run in parallel and
//! their gradients are reduced in region order, so results do not depend on
//! the schedule.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::quadrature::{GaussHermite, DEFAULT_NODES};
use super::{
    region_contributions, region_term, LocalInducing, RegionConsts, RegionParams, RegionState, RegionVars,
    VariationalState, AMPLITUDE_FLOOR,
};
use crate::autodiff::{Real, Tape, Var};
use crate::dataset::{mean_var, Dataset};
use crate::error::{Error, Result};
use crate::jump_gp::{outlier_level, select_neighborhood};
use crate::kernels::chol_psd;
use crate::projection::{init_global_inducing, GlobalInducing, GlobalTerms, ThetaW};
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Steepest ascent; each step starts from the base rate and halves until the bound does not drop.
    GradientAscent,
    /// Adam on the unconstrained parameters, keeping the best state seen.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient_ascent" | "ga" => Ok(Optimizer::GradientAscent),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::input(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub rate: f64,
    pub optimizer: Optimizer,
    pub quadrature_nodes: usize,
    /// Early stop when the relative change stays below this for `patience` steps.
    pub rel_tol: f64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            rate: 0.01,
            optimizer: Optimizer::Adam,
            quadrature_nodes: DEFAULT_NODES,
            rel_tol: 1e-5,
            patience: 10,
        }
    }
}

/// Structural settings used to build the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub latent_dim: usize,
    pub neighbors: usize,
    pub l1: usize,
    pub l2: usize,
}

impl InitConfig {
    /// Neighborhood size 25 below 30 input dimensions, 35 otherwise.
    pub fn default_neighbors(dim: usize) -> usize {
        if dim < 30 { 25 } else { 35 }
    }

    pub fn defaults_for(dim: usize) -> Self {
        InitConfig { latent_dim: 5, neighbors: Self::default_neighbors(dim), l1: 4, l2: 40 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, best ELBO so far)`, starting with step 0.
    pub trace: Vec<(usize, f64)>,
    pub initial_elbo: f64,
    pub final_elbo: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 { xs[m] } else { 0.5 * (xs[m - 1] + xs[m]) }
}

/// Builds the initial variational state for the test locations `test_inputs`.
pub fn initialize(
    train_data: &Dataset,
    test_inputs: &DMatrix<f64>,
    init: &InitConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<VariationalState> {
    if init.latent_dim == 0 || init.l1 == 0 || init.l2 == 0 {
        return Err(Error::input("latent dimension and inducing counts must be at least 1"));
    }
    if init.neighbors < 2 || init.neighbors > train_data.len() {
        return Err(Error::input(format!("neighborhood size {} is not in [2, {}]", init.neighbors, train_data.len())));
    }
    if test_inputs.ncols() != train_data.dim() {
        return Err(Error::input("test inputs and training inputs differ in dimension"));
    }
    let q = init.latent_dim;
    let global = init_global_inducing(train_data, init.l2, q, &mut rng::stream(seed, 0, 0));
    // median nearest-neighbor spacing keeps K_RR well conditioned in low dimensions
    let dists: Vec<f64> = (0..init.l2)
        .filter_map(|a| {
            (0..init.l2)
                .filter(|&b| b != a)
                .map(|b| (global.inputs.row(a) - global.inputs.row(b)).norm())
                .min_by(f64::total_cmp)
        })
        .collect();
    let ell = median(dists);
    let theta_w = ThetaW { signal_std: 1.0, row_lengthscales: vec![if ell > 0.0 { ell } else { 1.0 }; q] };
    let global = whiten_global(global, &theta_w, &mut rng::stream(seed, 0, 1))?;

    let regions = (0..test_inputs.nrows())
        .map(|j| {
            let x_star: Vec<f64> = test_inputs.row(j).iter().copied().collect();
            let region = select_neighborhood(train_data, &x_star, init.neighbors)?;
            let mut r = rng::stream(seed, 1, j as u64);
            let z = DMatrix::from_fn(init.l1, q, |_, _| r.sample::<f64, _>(StandardNormal));
            let probe = LocalInducing { inputs: z.clone(), post_mean: DVector::zeros(init.l1), post_root: DMatrix::zeros(0, 0) };
            let chol = chol_psd(&probe.prior_cov(), 0.0)?;
            // Σ_r starts at the prior covariance plus a small random upper-triangular perturbation
            let mut root = chol.l.transpose();
            for a in 0..init.l1 {
                for b in a..init.l1 {
                    root[(a, b)] += 0.01 * r.sample::<f64, _>(StandardNormal);
                }
            }
            let near: Vec<f64> = region.targets.iter().take(init.neighbors.div_ceil(2)).copied().collect();
            let (mean, var) = mean_var(&near);
            let var = var.max(1e-6);
            // random slopes; all-zero slopes sit on a saddle shared with a zero projection mean
            let mut boundary: Vec<f64> = (0..=q).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            boundary[0] = 0.1;
            let params = RegionParams {
                boundary,
                noise_variance: 0.25 * var,
                mean,
                amplitude: var,
                outlier_level: outlier_level(&region),
                rho: vec![0.5; region.len()],
            };
            let local = LocalInducing { inputs: z, post_mean: DVector::zeros(init.l1), post_root: root };
            Ok(RegionState { region, local, params })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut state = VariationalState { global, theta_w, regions, train_data: train_data.clone(), config: config.clone() };
    refresh_rho(&mut state)?;
    Ok(state)
}

/// Restarts `q(R)` near its prior: means are small prior draws and variances
/// the KL-optimal diagonal `1/[K_RR⁻¹]_ll`. Unit variances and white-noise
/// means blow up the KL when the inducing inputs are dense.
fn whiten_global<R: Rng + ?Sized>(mut g: GlobalInducing, tw: &ThetaW, rng: &mut R) -> Result<GlobalInducing> {
    let (l2, d) = (g.l2(), g.dim());
    for k in 0..g.k {
        let ell = tw.row_lengthscales[k];
        let kr = DMatrix::from_fn(l2, l2, |a, b| {
            let d2 = (g.inputs.row(a) - g.inputs.row(b)).norm_squared();
            tw.signal_std.powi(2) * (-d2 / (2.0 * ell * ell)).exp()
        });
        let chol = chol_psd(&kr, 0.0)?;
        let inv = chol.inverse();
        for c in 0..d {
            let e = DVector::from_fn(l2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let draw = &chol.l * e;
            for l in 0..l2 {
                let at = g.idx(l, k, c);
                g.post_mean[at] = 0.1 * draw[l];
                g.post_var[at] = 1.0 / inv[(l, l)];
            }
        }
    }
    Ok(g)
}

/// Sets every `ρ^(j)` to its closed-form optimum under the current state.
pub fn refresh_rho(state: &mut VariationalState) -> Result<()> {
    let gh = GaussHermite::new(state.config.quadrature_nodes);
    let contrib = region_contributions(state, &gh)?;
    for (rs, (_, rho)) in state.regions.iter_mut().zip(contrib) {
        rs.params.rho = rho;
    }
    Ok(())
}

/// Offsets of the flat unconstrained parameter vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    l2: usize,
    k: usize,
    d: usize,
    l1: usize,
}

impl Layout {
    fn of(state: &VariationalState) -> Self {
        let l1 = state.regions.first().map_or(0, |r| r.local.len());
        Layout { l2: state.global.l2(), k: state.global.k, d: state.global.dim(), l1 }
    }

    fn global_len(&self) -> usize {
        self.l2 * self.d + 2 * self.l2 * self.k * self.d + 1 + self.k
    }

    fn region_len(&self) -> usize {
        self.l1 + self.l1 * (self.l1 + 1) / 2 + self.k + 1 + 3
    }

    fn global_terms<T: Real>(&self, p: &[T]) -> GlobalTerms<T> {
        let nx = self.l2 * self.d;
        let nr = self.l2 * self.k * self.d;
        GlobalTerms {
            l2: self.l2,
            k: self.k,
            d: self.d,
            x_tilde: p[..nx].to_vec(),
            mu: p[nx..nx + nr].to_vec(),
            var: p[nx + nr..nx + 2 * nr].iter().map(|v| (*v * 2.0).exp()).collect(),
            s: p[nx + 2 * nr].exp(),
            ell: p[nx + 2 * nr + 1..].iter().map(|v| v.exp()).collect(),
        }
    }

    fn region_vars<T: Real>(&self, p: &[T], outlier: f64) -> RegionVars<T> {
        let l1 = self.l1;
        let mut root = vec![T::cst(0.0); l1 * l1];
        let mut o = l1;
        for a in 0..l1 {
            for b in a..l1 {
                root[a * l1 + b] = p[o];
                o += 1;
            }
        }
        let nu = p[o..o + self.k + 1].to_vec();
        o += self.k + 1;
        RegionVars {
            mu_r: p[..l1].to_vec(),
            root,
            nu,
            noise_var: (p[o] * 2.0).exp(),
            mean: p[o + 1],
            amp: p[o + 2].exp() + AMPLITUDE_FLOOR,
            outlier: T::cst(outlier),
        }
    }
}

fn pack(state: &VariationalState, lay: &Layout) -> Vec<f64> {
    let g = &state.global;
    let mut p = Vec::with_capacity(lay.global_len() + state.regions.len() * lay.region_len());
    for l in 0..lay.l2 {
        p.extend(g.inputs.row(l).iter());
    }
    p.extend(&g.post_mean);
    p.extend(g.post_var.iter().map(|v| 0.5 * v.ln()));
    p.push(state.theta_w.signal_std.ln());
    p.extend(state.theta_w.row_lengthscales.iter().map(|v| v.ln()));
    for rs in &state.regions {
        p.extend(rs.local.post_mean.iter());
        for a in 0..lay.l1 {
            for b in a..lay.l1 {
                p.push(rs.local.post_root[(a, b)]);
            }
        }
        let q = &rs.params;
        p.extend(&q.boundary);
        p.push(0.5 * q.noise_variance.ln());
        p.push(q.mean);
        p.push((q.amplitude - AMPLITUDE_FLOOR).max(1e-300).ln());
    }
    p
}

fn unpack(template: &VariationalState, lay: &Layout, p: &[f64]) -> VariationalState {
    let mut s = template.clone();
    let gt = lay.global_terms(&p[..lay.global_len()]);
    s.global.inputs = DMatrix::from_row_slice(lay.l2, lay.d, &gt.x_tilde);
    s.global.post_mean = gt.mu;
    s.global.post_var = gt.var;
    s.theta_w = ThetaW { signal_std: gt.s, row_lengthscales: gt.ell };
    for (j, rs) in s.regions.iter_mut().enumerate() {
        let off = lay.global_len() + j * lay.region_len();
        let v = lay.region_vars(&p[off..off + lay.region_len()], rs.params.outlier_level);
        rs.local.post_mean = DVector::from_vec(v.mu_r);
        rs.local.post_root = DMatrix::from_row_slice(lay.l1, lay.l1, &v.root);
        rs.params.boundary = v.nu;
        rs.params.noise_variance = v.noise_var;
        rs.params.mean = v.mean;
        rs.params.amplitude = v.amp;
    }
    s
}

/// The bound as a function of the flat parameter vector.
pub struct Objective {
    lay: Layout,
    consts: Vec<RegionConsts>,
    gh: GaussHermite,
}

impl Objective {
    pub fn new(state: &VariationalState) -> Result<Self> {
        let consts = state.regions.iter().map(RegionConsts::new).collect::<Result<Vec<_>>>()?;
        Ok(Objective { lay: Layout::of(state), consts, gh: GaussHermite::new(state.config.quadrature_nodes) })
    }

    pub fn pack(&self, state: &VariationalState) -> Vec<f64> {
        pack(state, &self.lay)
    }

    pub fn unpack(&self, template: &VariationalState, p: &[f64]) -> VariationalState {
        unpack(template, &self.lay, p)
    }

    fn region_slice<'a, T>(&self, p: &'a [T], j: usize) -> &'a [T] {
        let off = self.lay.global_len() + j * self.lay.region_len();
        &p[off..off + self.lay.region_len()]
    }

    pub fn value(&self, p: &[f64]) -> Result<f64> {
        let gt = self.lay.global_terms(&p[..self.lay.global_len()]);
        let factors = gt.factors()?;
        let kl = gt.kl(&factors);
        let terms = par::map_range(self.consts.len(), |j| {
            let c = &self.consts[j];
            let v = self.lay.region_vars(self.region_slice(p, j), c.outlier_level);
            let (mean, var) = gt.qw_moments(&factors, &c.x_star);
            region_term(c, &v, &mean, &var, &self.gh)
        });
        Ok(terms.iter().sum::<f64>() - kl)
    }

    pub fn value_and_gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let lay = self.lay;
        let ng = lay.global_len();
        let n2 = lay.l2 * lay.l2;

        let core = Tape::new();
        let gvars = core.vars(&p[..ng]);
        let gt = lay.global_terms(&gvars);
        let factors = gt.factors()?;
        let kl = gt.kl(&factors);
        let fvals: Vec<Vec<f64>> = factors.iter().map(|f| f.iter().map(|v| v.value()).collect()).collect();

        struct Part {
            value: f64,
            global: Vec<f64>,
            factor: Vec<Vec<f64>>,
            local: Vec<f64>,
        }

        let parts = par::map_range(self.consts.len(), |j| {
            let c = &self.consts[j];
            let tape = Tape::new();
            let gl = tape.vars(&p[..ng]);
            let fl: Vec<Vec<Var<'_>>> = fvals
                .iter()
                .map(|f| {
                    (0..n2)
                        .map(|ab| if ab % lay.l2 <= ab / lay.l2 { tape.var(f[ab]) } else { Var::constant(0.0) })
                        .collect()
                })
                .collect();
            let rl = tape.vars(self.region_slice(p, j));
            let gt_r = lay.global_terms(&gl);
            let v = lay.region_vars(&rl, c.outlier_level);
            let (mean, var) = gt_r.qw_moments(&fl, &c.x_star);
            let term = region_term(c, &v, &mean, &var, &self.gh);
            let g = tape.gradient(term);
            Part {
                value: term.value(),
                global: g.wrt_all(&gl),
                factor: fl.iter().map(|f| g.wrt_all(f)).collect(),
                local: g.wrt_all(&rl),
            }
        });

        let mut grad = vec![0.0; p.len()];
        let mut factor_adj = vec![vec![0.0; n2]; lay.k];
        let mut value = -kl.value();
        for (j, part) in parts.into_iter().enumerate() {
            value += part.value;
            for (a, b) in grad[..ng].iter_mut().zip(&part.global) {
                *a += b;
            }
            for (acc, f) in factor_adj.iter_mut().zip(&part.factor) {
                for (a, b) in acc.iter_mut().zip(f) {
                    *a += b;
                }
            }
            let off = ng + j * lay.region_len();
            grad[off..off + lay.region_len()].copy_from_slice(&part.local);
        }
        let mut seeds = vec![(kl, -1.0)];
        for (f, adj) in factors.iter().zip(&factor_adj) {
            seeds.extend(f.iter().zip(adj).filter(|(_, a)| **a != 0.0).map(|(v, a)| (*v, *a)));
        }
        let back = core.gradient_seeded(&seeds);
        for (a, v) in grad[..ng].iter_mut().zip(&gvars) {
            *a += back.wrt(v);
        }
        Ok((value, grad))
    }
}

/// Maximizes the bound from `state`, returning the best state seen.
pub fn train(state: &VariationalState) -> Result<(VariationalState, TrainReport)> {
    let cfg = state.config.clone();
    let obj = Objective::new(state)?;
    let mut p = obj.pack(state);
    let f0 = obj.value(&p)?;
    if !f0.is_finite() {
        return Err(Error::numerical("non-finite ELBO at step 0"));
    }
    let mut report = TrainReport { trace: vec![(0, f0)], initial_elbo: f0, final_elbo: f0, ..Default::default() };
    if cfg.steps == 0 {
        return Ok((state.clone(), report));
    }

    let mut best_p = p.clone();
    let mut best = f0;
    let mut improved = false;
    let mut cur = f0;
    let mut quiet = 0;
    let (mut m1, mut m2) = (vec![0.0; p.len()], vec![0.0; p.len()]);
    for step in 1..=cfg.steps {
        let (f, g) = obj.value_and_gradient(&p)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite ELBO or gradient at step {step}")));
        }
        let mut rate = cfg.rate;
        let next = match cfg.optimizer {
            Optimizer::GradientAscent => {
                let mut accepted = None;
                for _ in 0..60 {
                    let cand: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a + rate * b).collect();
                    match obj.value(&cand) {
                        Ok(v) if v.is_finite() && v >= f => {
                            accepted = Some((cand, v));
                            break;
                        }
                        // failed factorizations count as rejections
                        Ok(_) | Err(Error::Numerical(_)) => rate *= 0.5,
                        Err(e) => return Err(e),
                    }
                }
                accepted
            }
            Optimizer::Adam => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                let t = step as i32;
                let cand: Vec<f64> = (0..p.len())
                    .map(|i| {
                        m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
                        m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
                        let mh = m1[i] / (1.0 - b1.powi(t));
                        let vh = m2[i] / (1.0 - b2.powi(t));
                        p[i] + rate * mh / (vh.sqrt() + eps)
                    })
                    .collect();
                match obj.value(&cand) {
                    Ok(v) if v.is_finite() => Some((cand, v)),
                    Ok(_) | Err(Error::Numerical(_)) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        report.steps_run = step;
        let Some((cand, v)) = next else {
            log::info!("step {step}: no acceptable move, stopping");
            report.stopped_early = true;
            report.trace.push((step, best));
            break;
        };
        let rel = (v - cur).abs() / cur.abs().max(1.0);
        p = cand;
        cur = v;
        if v > best {
            best = v;
            best_p.clone_from(&p);
            improved = true;
        }
        report.trace.push((step, best));
        log::info!("step {step} elbo {v:.6} rate {rate:e}");
        quiet = if rel < cfg.rel_tol { quiet + 1 } else { 0 };
        if quiet >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    report.final_elbo = best;
    if !improved {
        return Ok((state.clone(), report));
    }
    let mut out = obj.unpack(state, &best_p);
    refresh_rho(&mut out)?;
    Ok((out, report))
}

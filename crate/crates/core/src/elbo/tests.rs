use super::train::{initialize, InitConfig, Objective};
use super::*;
use crate::autodiff::log_sigmoid;
use crate::projection::kl_global;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random valid state built directly (regions need not come from a neighborhood search).
pub(crate) fn random_state(rng: &mut ChaCha8Rng, j: usize, n: usize, l1: usize, l2: usize, k: usize, d: usize) -> VariationalState {
    let global = GlobalInducing {
        inputs: DMatrix::from_fn(l2, d, |_, _| rng.random_range(-1.0..1.0)),
        k,
        post_mean: (0..l2 * k * d).map(|_| 0.5 * normal(rng)).collect(),
        post_var: (0..l2 * k * d).map(|_| rng.random_range(0.1..0.8)).collect(),
    };
    let theta_w = ThetaW { signal_std: rng.random_range(0.6..1.2), row_lengthscales: (0..k).map(|_| rng.random_range(0.6..1.4)).collect() };
    let regions = (0..j)
        .map(|_| {
            let inputs = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let targets = DVector::from_fn(n, |_, _| 2.0 * normal(rng));
            let x_star: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            let region = LocalRegion { x_star, inputs, targets, indices: (0..n).collect() };
            let mut root = DMatrix::zeros(l1, l1);
            for a in 0..l1 {
                root[(a, a)] = rng.random_range(0.4..1.0);
                for b in a + 1..l1 {
                    root[(a, b)] = 0.2 * normal(rng);
                }
            }
            let local = LocalInducing {
                inputs: DMatrix::from_fn(l1, k, |_, _| normal(rng)),
                post_mean: DVector::from_fn(l1, |_, _| normal(rng)),
                post_root: root,
            };
            let params = RegionParams {
                boundary: (0..=k).map(|_| normal(rng)).collect(),
                noise_variance: rng.random_range(0.3..1.5),
                mean: normal(rng),
                amplitude: rng.random_range(0.5..2.0),
                outlier_level: rng.random_range(2.0..8.0),
                rho: vec![0.5; n],
            };
            RegionState { region, local, params }
        })
        .collect();
    let train_data = Dataset::new(DMatrix::zeros(0, d), DVector::zeros(0)).unwrap();
    VariationalState { global, theta_w, regions, train_data, config: TrainConfig::default() }
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn gauss_expect_log_sigmoid(mu: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return log_sigmoid(mu);
    }
    simpson(
        |z| log_sigmoid(z) * (-0.5 * ((z - mu) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()),
        mu - 12.0 * sd,
        mu + 12.0 * sd,
        20_000,
    )
}

#[test]
fn prior_matching_cancels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut st = random_state(&mut rng, 1, 4, 3, 3, 2, 3);
    let rs = &mut st.regions[0];
    rs.local.post_mean = DVector::zeros(3);
    rs.local.post_root = rs.local.prior_factor().unwrap().l.transpose();
    let qw = crate::projection::qw_moments(&st.global, &st.theta_w, &rs.region.x_star).unwrap();
    let sc = likelihood_scalars(&rs.region, &rs.local, &qw, &rs.params).unwrap();
    for s in sc {
        assert!((s.v1 + s.t2 - rs.params.amplitude).abs() < 1e-12);
        assert_eq!(s.e_f, 0.0);
    }
}

#[test]
fn quad_vanishes_on_constructed_instance() {
    // deterministic projection, one inducing point on the projected input, Σ_r = 0
    let x_star = vec![0.0, 0.0];
    let inputs = DMatrix::from_row_slice(1, 2, &[0.4, -0.2]);
    let w = DMatrix::from_row_slice(1, 2, &[1.5, 0.5]);
    let z = (&w * inputs.row(0).transpose())[(0, 0)];
    let a = 2.5;
    let mu_r = 0.8;
    let e_f = a.sqrt() * mu_r;
    let region = LocalRegion { x_star, inputs, targets: DVector::from_element(1, 1.0 + e_f), indices: vec![0] };
    let li = LocalInducing { inputs: DMatrix::from_element(1, 1, z), post_mean: DVector::from_element(1, mu_r), post_root: DMatrix::zeros(1, 1) };
    let params = RegionParams { boundary: vec![0.0, 0.0], noise_variance: 0.7, mean: 1.0, amplitude: a, outlier_level: 1.0, rho: vec![0.5] };
    let qw = ProjectionPosterior { mean: w, var: DMatrix::zeros(1, 2) };
    let s = likelihood_scalars(&region, &li, &qw, &params).unwrap()[0];
    assert!((s.e_f - e_f).abs() < 1e-12);
    assert!(s.v1.abs() < 1e-12);
    assert!((s.t2 - a * mu_r * mu_r).abs() < 1e-12);
    assert!(s.quad.abs() < 1e-12);

    // direct evaluation with a nonzero residual
    let mut r2 = region.clone();
    r2.targets[0] += 0.3;
    let s2 = likelihood_scalars(&r2, &li, &qw, &params).unwrap()[0];
    let yt = r2.targets[0] - 1.0;
    let want = (yt * yt - 2.0 * yt * s2.e_f + s2.v1 + s2.t2) / (2.0 * 0.7);
    assert!((s2.quad - want).abs() < 1e-14);
    assert!((s2.quad - 0.09 / 1.4).abs() < 1e-12);
}

#[test]
fn covariance_enters_t2_only_through_its_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let st = random_state(&mut rng, 1, 3, 2, 2, 1, 2);
    let rs = &st.regions[0];
    let qw = crate::projection::qw_moments(&st.global, &st.theta_w, &rs.region.x_star).unwrap();
    let full = likelihood_scalars(&rs.region, &rs.local, &qw, &rs.params).unwrap();
    let mut li0 = rs.local.clone();
    li0.post_root = DMatrix::zeros(2, 2);
    let none = likelihood_scalars(&rs.region, &li0, &qw, &rs.params).unwrap();
    let kinv = rs.local.prior_factor().unwrap().inverse();
    let sigma = rs.local.post_cov();
    for i in 0..3 {
        let p2 = super::psi::psi2(
            &DMatrix::from_row_slice(3, 2, &centered_inputs(&rs.region).concat()),
            i,
            &qw,
            &rs.local,
            rs.params.amplitude.sqrt(),
        );
        let extra = (&kinv * &p2 * &kinv * &sigma).trace();
        assert!(extra > 0.0);
        assert!((full[i].t2 - none[i].t2 - extra).abs() < 1e-12);
        assert_eq!(full[i].e_f, none[i].e_f);
    }
}

#[test]
fn rho_examples() {
    assert_eq!(optimal_rho(1.3, 1.3), 0.5);
    assert!((optimal_rho(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
    assert_eq!(optimal_rho(700.0, 0.0), 1.0);
    assert_eq!(optimal_rho(-800.0, 0.0), 0.0);
    assert!(optimal_rho(-800.0, 0.0).is_finite());
}

#[test]
fn boundary_moment_examples() {
    let qw = ProjectionPosterior {
        mean: DMatrix::from_row_slice(2, 3, &[0.5, -0.2, 1.0, 0.3, 0.8, -0.6]),
        var: DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.05, 0.3, 0.1, 0.2]),
    };
    let x = [0.4, -1.0, 0.7];
    assert_eq!(boundary_moments(&x, &qw, &[1.7, 0.0, 0.0]), (1.7, 0.0));
    let det = ProjectionPosterior { mean: qw.mean.clone(), var: DMatrix::zeros(2, 3) };
    let nu = [0.3, -1.2, 0.9];
    let (mu, sd) = boundary_moments(&x, &det, &nu);
    let wx = &qw.mean * DVector::from_row_slice(&x);
    assert!((mu - (0.3 - 1.2 * wx[0] + 0.9 * wx[1])).abs() < 1e-14);
    assert_eq!(sd, 0.0);

    // Monte Carlo oracle for the random case
    let (mu, sd) = boundary_moments(&x, &qw, &nu);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 1_000_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..m {
        let w = crate::projection::sample_w(&qw, &mut rng);
        let z = &w * DVector::from_row_slice(&x);
        let h = nu[0] + nu[1] * z[0] + nu[2] * z[1];
        s1 += h;
        s2 += h * h;
    }
    let em = s1 / m as f64;
    let ev = s2 / m as f64 - em * em;
    assert!((em - mu).abs() < 0.01 * mu.abs().max(0.1));
    assert!((ev - sd * sd).abs() < 0.01 * sd * sd);
}

#[test]
fn kl_local_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = DMatrix::from_fn(4, 2, |_, _| normal(&mut rng));
    let mut li = LocalInducing { inputs: z, post_mean: DVector::zeros(4), post_root: DMatrix::zeros(4, 4) };
    li.post_root = li.prior_factor().unwrap().l.transpose();
    assert!(kl_local(&li).unwrap().abs() < 1e-10);

    for _ in 0..20 {
        let st = random_state(&mut rng, 1, 2, 4, 2, 2, 2);
        let li = &st.regions[0].local;
        let got = kl_local(li).unwrap();
        let k = li.prior_cov() + DMatrix::identity(4, 4) * li.prior_factor().unwrap().jitter;
        let kinv = k.clone().try_inverse().unwrap();
        let s = li.post_cov();
        let want = 0.5
            * ((&kinv * &s).trace() + (li.post_mean.transpose() * &kinv * &li.post_mean)[(0, 0)] - 4.0
                + k.determinant().ln()
                - s.determinant().ln());
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        assert!(got >= -1e-8);
        // the taped evaluation agrees
        let c = RegionConsts::new(&st.regions[0]).unwrap();
        let v = RegionVars::from_state(&st.regions[0]);
        assert!((kl_local_with(&c, &v) - got).abs() < 1e-10);
    }
}

#[test]
fn empty_state_is_negative_global_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let st = random_state(&mut rng, 0, 3, 2, 3, 2, 2);
    let kl = kl_global(&st.global, &st.theta_w).unwrap();
    assert_eq!(elbo(&st).unwrap(), -kl);
}

#[test]
fn identical_regions_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let one = random_state(&mut rng, 1, 4, 2, 3, 2, 3);
    let mut two = one.clone();
    two.regions.push(one.regions[0].clone());
    let kl = kl_global(&one.global, &one.theta_w).unwrap();
    let r = elbo(&one).unwrap() + kl;
    assert!((elbo(&two).unwrap() - (2.0 * r - kl)).abs() < 1e-10);
}

#[test]
fn single_point_hand_evaluation() {
    let s: f64 = 0.9;
    let x_star = 0.3;
    let c = 0.6; // centered input
    let global = GlobalInducing { inputs: DMatrix::from_element(1, 1, x_star), k: 1, post_mean: vec![0.0], post_var: vec![s * s] };
    let theta_w = ThetaW { signal_std: s, row_lengthscales: vec![0.7] };
    let region = LocalRegion {
        x_star: vec![x_star],
        inputs: DMatrix::from_element(1, 1, x_star + c),
        targets: DVector::from_element(1, 1.4),
        indices: vec![0],
    };
    let local = LocalInducing { inputs: DMatrix::zeros(1, 1), post_mean: DVector::zeros(1), post_root: DMatrix::identity(1, 1) };
    let (nu0, nu1, a, sig2, mean, u) = (0.4, -1.1, 1.8, 0.6, 0.5, 5.0);
    let params = RegionParams { boundary: vec![nu0, nu1], noise_variance: sig2, mean, amplitude: a, outlier_level: u, rho: vec![0.5] };
    let train_data = Dataset::new(DMatrix::zeros(0, 1), DVector::zeros(0)).unwrap();
    let st = VariationalState { global, theta_w, regions: vec![RegionState { region, local, params }], train_data, config: TrainConfig::default() };

    // q(W) = N(0, s²); V1 + T2 = a and E_f = 0 under the prior; boundary z ~ N(ν₀, ν₁² s² c²)
    let quad = ((1.4 - mean) * (1.4 - mean) + a) / (2.0 * sig2);
    let sd_z = (nu1 * s * c).abs();
    let e_in = gauss_expect_log_sigmoid(nu0, sd_z);
    let e_out = e_in - nu0;
    let t1 = -0.5 * (2.0 * std::f64::consts::PI * sig2).ln() - quad + e_in;
    let t2 = -u.ln() + e_out;
    let want = t1.max(t2) + ((t1 - t2).abs() * -1.0).exp().ln_1p();
    let got = elbo(&st).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

/// Exact log evidence for K = D = 1, J = 1 by quadrature over the scalar projection.
fn exact_log_evidence(st: &VariationalState) -> f64 {
    let rs = &st.regions[0];
    let p = &rs.params;
    let x: Vec<f64> = centered_inputs(&rs.region).into_iter().map(|r| r[0]).collect();
    let y: Vec<f64> = rs.region.targets.iter().copied().collect();
    let n = x.len();
    let s = st.theta_w.signal_std;
    let integrand = |w: f64| {
        let prior = (-0.5 * (w / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let mut total = 0.0;
        for mask in 0..(1u32 << n) {
            let inside: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let mut lp = 0.0;
            for i in 0..n {
                let h = p.boundary[0] + p.boundary[1] * w * x[i];
                lp += if mask & (1 << i) != 0 { log_sigmoid(h) } else { log_sigmoid(-h) };
            }
            lp -= (n - inside.len()) as f64 * p.outlier_level.ln();
            if !inside.is_empty() {
                let m = inside.len();
                let cov = DMatrix::from_fn(m, m, |a, b| {
                    let d = w * (x[inside[a]] - x[inside[b]]);
                    p.amplitude * (-0.5 * d * d).exp() + if a == b { p.noise_variance } else { 0.0 }
                });
                let r = DVector::from_fn(m, |a, _| y[inside[a]] - p.mean);
                let chol = cov.cholesky().unwrap();
                let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                lp += -0.5 * (r.dot(&chol.solve(&r)) + logdet + m as f64 * (2.0 * std::f64::consts::PI).ln());
            }
            total += lp.exp();
        }
        prior * total
    };
    simpson(integrand, -12.0 * s, 12.0 * s, 20_000).ln()
}

#[test]
fn bound_holds_on_conjugate_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let mut st = random_state(&mut rng, 1, 2, 2, 1, 1, 1);
        // a single global inducing site keeps p(W) exactly N(0, s²) at the test point
        st.regions[0].local.inputs = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let lower = elbo(&st).unwrap();
        let exact = exact_log_evidence(&st);
        assert!(lower <= exact + 1e-6, "trial {trial}: {lower} > {exact}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..3 {
        let st = random_state(&mut rng, 2, 5, 2, 3, 2, 3);
        let obj = Objective::new(&st).unwrap();
        let p = obj.pack(&st);
        let (f, g) = obj.value_and_gradient(&p).unwrap();
        assert!((f - obj.value(&p).unwrap()).abs() < 1e-9 * f.abs().max(1.0));
        assert!((f - elbo(&st).unwrap()).abs() < 1e-8 * f.abs().max(1.0));
        let h = 1e-5;
        for i in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (obj.value(&a).unwrap() - obj.value(&b).unwrap()) / (2.0 * h);
            let tol = (1e-4 * fd.abs()).max(1e-7).max(1e-4 * g[i].abs());
            assert!((g[i] - fd).abs() <= tol.max(1e-6), "param {i}: {} vs {fd}", g[i]);
        }
    }
}

#[test]
fn pack_roundtrip_preserves_elbo() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let st = random_state(&mut rng, 2, 4, 3, 4, 2, 2);
    let obj = Objective::new(&st).unwrap();
    let back = obj.unpack(&st, &obj.pack(&st));
    assert!((elbo(&back).unwrap() - elbo(&st).unwrap()).abs() < 1e-9);
}

#[test]
fn zero_steps_and_zero_rate_leave_state_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut st = random_state(&mut rng, 2, 4, 2, 3, 1, 2);
    train::refresh_rho(&mut st).unwrap();
    st.config.steps = 0;
    let (out, rep) = train(&st).unwrap();
    assert_eq!(out, st);
    assert_eq!(rep.trace.len(), 1);

    for opt in [Optimizer::GradientAscent, Optimizer::Adam] {
        st.config.steps = 5;
        st.config.rate = 0.0;
        st.config.optimizer = opt;
        let (out, rep) = train(&st).unwrap();
        assert_eq!(out, st);
        assert_eq!(rep.final_elbo, rep.initial_elbo);
        assert_eq!(elbo(&out).unwrap(), elbo(&st).unwrap());
    }
}

#[test]
fn training_improves_the_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]).collect();
    let ys: Vec<f64> = rows.iter().map(|r| if r[0] > 0.0 { 10.0 } else { 0.0 } + normal(&mut rng)).collect();
    let data = Dataset::from_rows(&rows, ys).unwrap();
    let tests = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-0.4..0.4));
    let init = InitConfig { latent_dim: 2, neighbors: 15, l1: 3, l2: 5 };
    let cfg = TrainConfig { steps: 40, ..TrainConfig::default() };
    let st = initialize(&data, &tests, &init, &cfg, 3).unwrap();
    let (out, rep) = train(&st).unwrap();
    assert!(rep.final_elbo > rep.initial_elbo);
    for w in rep.trace.windows(2) {
        assert!(w[1].1 >= w[0].1);
    }
    assert!((elbo(&out).unwrap() - rep.final_elbo).abs() < 1e-6 * rep.final_elbo.abs());
    assert!(out.regions.iter().all(|r| r.params.rho.iter().all(|p| (0.0..=1.0).contains(p))));
}

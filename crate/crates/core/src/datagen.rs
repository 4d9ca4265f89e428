//! Synthetic piecewise-GP benchmarks on a low-dimensional latent space and
//! the maps that lift them to high-dimensional observed inputs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{chol_psd, sq_dist};
use crate::rng;

/// Signal variance of the within-region GP.
pub const THETA1: f64 = 9.0;
/// Squared-distance divisor of the within-region GP, `θ₁ exp(−‖z − z′‖²/θ₂)`.
pub const THETA2: f64 = 200.0;
pub const NOISE_VARIANCE: f64 = 4.0;
pub const L2_JUMP: f64 = 27.0;
pub const LH_STEP: f64 = 13.5;
/// Test points must satisfy `|f_j(z)| ≤ band · (1 + ‖∇f_j(z)‖)` for some `j`.
pub const LH_BAND: f64 = 0.05;
const LH_MAX_ATTEMPTS: usize = 1_000_000;
/// Regions larger than this are drawn block by block.
const JOINT_LIMIT: usize = 2000;
const BLOCK: usize = 1000;
const ANCHORS: usize = 300;
const COND_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDataset {
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub region_labels: Vec<usize>,
    pub noise_variance: f64,
}

/// `θ₁ exp(−‖a − b‖²/θ₂)`.
pub fn region_kernel(a: &[f64], b: &[f64]) -> f64 {
    THETA1 * (-sq_dist(a, b) / THETA2).exp()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

fn normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Zero-mean joint draw of the region GP at `points` (row indices into `z`).
pub fn draw_region_gp<R: Rng + ?Sized>(z: &DMatrix<f64>, points: &[usize], rng: &mut R) -> Result<DVector<f64>> {
    let rows: Vec<Vec<f64>> = points.iter().map(|&i| row(z, i)).collect();
    let cov = |a: &[Vec<f64>], b: &[Vec<f64>]| DMatrix::from_fn(a.len(), b.len(), |i, j| region_kernel(&a[i], &b[j]));
    if rows.len() <= JOINT_LIMIT {
        let chol = chol_psd(&cov(&rows, &rows), 0.0)?;
        return Ok(&chol.l * normals(rows.len(), rng));
    }
    // first block jointly, then each further block conditioned on a fixed anchor set
    let mut out = DVector::zeros(rows.len());
    let first = &rows[..BLOCK];
    let chol = chol_psd(&cov(first, first), 0.0)?;
    out.rows_mut(0, BLOCK).copy_from(&(&chol.l * normals(BLOCK, rng)));
    let anchors = &rows[..ANCHORS];
    let ya = out.rows(0, ANCHORS).into_owned();
    let ka = chol_psd(&cov(anchors, anchors), 0.0)?;
    let alpha = ka.solve(&ya);
    let mut start = BLOCK;
    while start < rows.len() {
        let end = (start + BLOCK).min(rows.len());
        let block = &rows[start..end];
        let kba = cov(block, anchors);
        let mean = &kba * &alpha;
        let mut cond = cov(block, block);
        let w = DMatrix::from_fn(ANCHORS, block.len(), |a, b| kba[(b, a)]);
        let half = ka.l.solve_lower_triangular(&w).ok_or_else(|| Error::numerical("anchor solve failed"))?;
        cond -= half.transpose() * &half;
        // the conditional is numerically zero; relative jitter cannot rescue it
        for d in 0..cond.nrows() {
            cond[(d, d)] += COND_FLOOR * THETA1;
        }
        let chol = chol_psd(&cond, 0.0)?;
        out.rows_mut(start, end - start).copy_from(&(mean + &chol.l * normals(end - start, rng)));
        start = end;
    }
    Ok(out)
}

/// Piecewise response: region mean plus an independent region GP, plus optional noise.
fn piecewise_targets<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    labels: &[usize],
    means: &dyn Fn(usize) -> f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mut y = DVector::zeros(z.nrows());
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    for lab in distinct {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == lab).collect();
        let draw = draw_region_gp(z, &idx, rng)?;
        for (k, &i) in idx.iter().enumerate() {
            y[i] = means(lab) + draw[k];
        }
    }
    Ok(y)
}

/// L2 partition: 1 above the curve `z₂ = 0.25 sin(2π z₁)`.
pub fn l2_region(z: &[f64]) -> usize {
    usize::from(z[1] >= 0.25 * (2.0 * PI * z[0]).sin())
}

fn split(z: &DMatrix<f64>, y: &DVector<f64>, labels: &[usize], n_train: usize, noise: (f64, f64)) -> (LatentDataset, LatentDataset) {
    let n = z.nrows();
    let part = |a: usize, b: usize, nv: f64| LatentDataset {
        z: z.rows(a, b - a).into_owned(),
        y: y.rows(a, b - a).into_owned(),
        region_labels: labels[a..b].to_vec(),
        noise_variance: nv,
    };
    (part(0, n_train, noise.0), part(n_train, n, noise.1))
}

/// Two-region phantom on `[−0.5, 0.5]²`. Every point, train and test, carries
/// `N(0, 4)` noise; region means are drawn independently from `{0, 27}`.
pub fn gen_l2<R: Rng + ?Sized>(n_train: usize, n_test: usize, rng: &mut R) -> Result<(LatentDataset, LatentDataset, [f64; 2])> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::input("train and test sizes must be at least 1"));
    }
    let n = n_train + n_test;
    let z = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-0.5..0.5));
    let labels: Vec<usize> = (0..n).map(|i| l2_region(&row(&z, i))).collect();
    let means = [0, 1].map(|_| if rng.random_bool(0.5) { L2_JUMP } else { 0.0 });
    let mut y = piecewise_targets(&z, &labels, &|l| means[l], rng)?;
    for v in y.iter_mut() {
        *v += NOISE_VARIANCE.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    let (train, test) = split(&z, &y, &labels, n_train, (NOISE_VARIANCE, NOISE_VARIANCE));
    Ok((train, test, means))
}

/// Partition functions of the LH benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LhPartition {
    /// `r_j ∈ {±1}`, j = 1..K.
    pub signs: Vec<f64>,
}

impl LhPartition {
    /// `f₀ … f_K` at `z`.
    pub fn values(&self, z: &[f64]) -> Vec<f64> {
        let r2: f64 = z.iter().map(|v| v * v).sum();
        let mut out = vec![r2 - 0.16];
        for (j, r) in self.signs.iter().enumerate() {
            out.push(r2 - z[j] * z[j] + (z[j] + 0.5 * r).powi(2) - 0.09);
        }
        out
    }

    fn gradient_norms(&self, z: &[f64]) -> Vec<f64> {
        let base: f64 = z.iter().map(|v| 4.0 * v * v).sum();
        let mut out = vec![base.sqrt()];
        for (j, r) in self.signs.iter().enumerate() {
            let gj = 2.0 * (z[j] + 0.5 * r);
            out.push((base - 4.0 * z[j] * z[j] + gj * gj).sqrt());
        }
        out
    }

    pub fn region(&self, z: &[f64]) -> usize {
        self.values(z).iter().enumerate().map(|(j, f)| if *f >= 0.0 { 1 << j } else { 0 }).sum()
    }

    pub fn near_boundary(&self, z: &[f64]) -> bool {
        self.values(z).iter().zip(self.gradient_norms(z)).any(|(f, g)| f.abs() <= LH_BAND * (1.0 + g))
    }
}

/// LH benchmark on `[−0.5, 0.5]^K`: noisy uniform training points, noiseless
/// test points near a partition boundary. Region `k` has mean `±13.5k`.
pub fn gen_lh<R: Rng + ?Sized>(k: usize, n_train: usize, n_test: usize, rng: &mut R) -> Result<(LatentDataset, LatentDataset, LhPartition)> {
    if k < 2 {
        return Err(Error::input("LH needs a latent dimension of at least 2"));
    }
    if n_train == 0 || n_test == 0 {
        return Err(Error::input("train and test sizes must be at least 1"));
    }
    let part = LhPartition { signs: (0..k).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect() };
    let n = n_train + n_test;
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n_train {
        for c in 0..k {
            z[(i, c)] = rng.random_range(-0.5..0.5);
        }
    }
    for i in n_train..n {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > LH_MAX_ATTEMPTS {
                return Err(Error::numerical("no boundary-proximal test point after 10^6 attempts"));
            }
            let cand: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
            if part.near_boundary(&cand) {
                for (c, v) in cand.into_iter().enumerate() {
                    z[(i, c)] = v;
                }
                break;
            }
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| part.region(&row(&z, i))).collect();
    let n_regions = 1usize << (k + 1);
    let signs: Vec<f64> = (0..n_regions).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let mut y = piecewise_targets(&z, &labels, &|l| signs[l] * LH_STEP * l as f64, rng)?;
    for v in y.iter_mut().take(n_train) {
        *v += NOISE_VARIANCE.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    let (train, test) = split(&z, &y, &labels, n_train, (NOISE_VARIANCE, 0.0));
    Ok((train, test, part))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionKind {
    Rp,
    Rf,
    Pe,
}

impl std::str::FromStr for ExpansionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rp" => Ok(ExpansionKind::Rp),
            "rf" => Ok(ExpansionKind::Rf),
            "pe" => Ok(ExpansionKind::Pe),
            _ => Err(Error::input(format!("unknown expansion '{s}' (expected rp, rf or pe)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSpec {
    pub kind: ExpansionKind,
    pub target_dim: usize,
    pub seed: u64,
}

/// A sampled lifting map, applied identically to train and test inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expansion {
    /// `x = W z`, `W` D×K.
    Rp { w: DMatrix<f64> },
    /// `x = √(2/D) cos(Ω z + b)`.
    Rf { omega: DMatrix<f64>, b: Vec<f64> },
    /// First `D` monomials of degree 1..3 in lexicographic order.
    Pe { k: usize, d: usize },
}

/// Monomials of degree 1..3 in `k` variables as sorted index lists.
pub fn monomial_basis(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 0..k {
        out.push(vec![a]);
    }
    for a in 0..k {
        for b in a..k {
            out.push(vec![a, b]);
        }
    }
    for a in 0..k {
        for b in a..k {
            for c in b..k {
                out.push(vec![a, b, c]);
            }
        }
    }
    out
}

fn matrix_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    sv.iter().filter(|s| **s > 1e-10 * max.max(f64::MIN_POSITIVE)).count()
}

impl Expansion {
    pub fn sample<R: Rng + ?Sized>(kind: ExpansionKind, k: usize, d: usize, rng: &mut R) -> Result<Expansion> {
        match kind {
            ExpansionKind::Rp => {
                if d < k {
                    return Err(Error::input(format!("random projection to {d} < {k} dimensions")));
                }
                loop {
                    let w = DMatrix::from_fn(d, k, |_, _| rng.sample(StandardNormal));
                    if matrix_rank(&w) == k {
                        return Ok(Expansion::Rp { w });
                    }
                }
            }
            ExpansionKind::Rf => {
                if d == 0 {
                    return Err(Error::input("random features need at least one output"));
                }
                let omega = DMatrix::from_fn(d, k, |_, _| rng.sample(StandardNormal));
                let b = (0..d).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                Ok(Expansion::Rf { omega, b })
            }
            ExpansionKind::Pe => {
                let size = monomial_basis(k).len();
                if d < k || d > size {
                    return Err(Error::input(format!(
                        "polynomial expansion of {k} variables supports {k}..={size} outputs, not {d}"
                    )));
                }
                Ok(Expansion::Pe { k, d })
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Expansion::Rp { w } => w.nrows(),
            Expansion::Rf { omega, .. } => omega.nrows(),
            Expansion::Pe { d, .. } => *d,
        }
    }

    /// Maps each row of `z` (N×K) to the observed space (N×D).
    pub fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Expansion::Rp { w } => z * w.transpose(),
            Expansion::Rf { omega, b } => {
                let d = omega.nrows();
                let scale = (2.0 / d as f64).sqrt();
                let mut x = z * omega.transpose();
                for mut r in x.row_iter_mut() {
                    for (c, v) in r.iter_mut().enumerate() {
                        *v = scale * (*v + b[c]).cos();
                    }
                }
                x
            }
            Expansion::Pe { k, d } => {
                let basis = monomial_basis(*k);
                DMatrix::from_fn(z.nrows(), *d, |i, c| basis[c].iter().map(|&a| z[(i, a)]).product())
            }
        }
    }
}

/// Samples the expansion described by `spec` and applies it to `z`.
pub fn expand(z: &DMatrix<f64>, spec: &ExpansionSpec) -> Result<DMatrix<f64>> {
    let e = Expansion::sample(spec.kind, z.ncols(), spec.target_dim, &mut rng::stream(spec.seed, 3, 0))?;
    Ok(e.apply(z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    L2,
    Lh,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(GeneratorKind::L2),
            "lh" => Ok(GeneratorKind::Lh),
            _ => Err(Error::input(format!("unknown generator '{s}' (expected l2 or lh)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Latent dimension (fixed at 2 for L2).
    pub latent_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// `None` keeps the latent inputs as observed inputs.
    pub expansion: Option<(ExpansionKind, usize)>,
}

impl GeneratorSpec {
    pub fn l2() -> Self {
        GeneratorSpec { kind: GeneratorKind::L2, latent_dim: 2, n_train: 1000, n_test: 100, expansion: None }
    }
}

/// Provenance written next to generated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub spec: GeneratorSpec,
    pub seed: u64,
    pub theta1: f64,
    pub theta2: f64,
    pub noise_variance: f64,
    pub test_noise_variance: f64,
    pub boundary: String,
    pub region_means: Vec<f64>,
    pub lh_signs: Option<Vec<f64>>,
    pub lh_band: Option<f64>,
    pub expansion: Option<Expansion>,
}

pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    pub latent_train: LatentDataset,
    pub latent_test: LatentDataset,
    pub meta: GeneratorMeta,
}

/// Generates a benchmark and its expansion from one seed.
pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<Generated> {
    let mut r = rng::stream(seed, 2, 0);
    let (latent_train, latent_test, boundary, region_means, lh_signs, lh_band) = match spec.kind {
        GeneratorKind::L2 => {
            if spec.latent_dim != 2 {
                return Err(Error::input("the L2 benchmark has a two-dimensional latent space"));
            }
            let (tr, te, means) = gen_l2(spec.n_train, spec.n_test, &mut r)?;
            (tr, te, "z2 >= 0.25 sin(2 pi z1)".to_string(), means.to_vec(), None, None)
        }
        GeneratorKind::Lh => {
            let (tr, te, part) = gen_lh(spec.latent_dim, spec.n_train, spec.n_test, &mut r)?;
            (
                tr,
                te,
                "region = sum_j 2^j [f_j(z) >= 0]; test |f_j| <= band (1 + |grad f_j|)".to_string(),
                vec![],
                Some(part.signs),
                Some(LH_BAND),
            )
        }
    };
    let expansion = match spec.expansion {
        Some((kind, d)) => Some(Expansion::sample(kind, spec.latent_dim, d, &mut rng::stream(seed, 3, 0))?),
        None => None,
    };
    let lift = |z: &DMatrix<f64>| expansion.as_ref().map_or_else(|| z.clone(), |e| e.apply(z));
    let train = Dataset::new(lift(&latent_train.z), latent_train.y.clone())?;
    let test = Dataset::new(lift(&latent_test.z), latent_test.y.clone())?;
    let meta = GeneratorMeta {
        spec: spec.clone(),
        seed,
        theta1: THETA1,
        theta2: THETA2,
        noise_variance: NOISE_VARIANCE,
        test_noise_variance: latent_test.noise_variance,
        boundary,
        region_means,
        lh_signs,
        lh_band,
        expansion: expansion.clone(),
    };
    Ok(Generated { train, test, latent_train, latent_test, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_sizes_and_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (tr, te, means) = gen_l2(1000, 100, &mut rng).unwrap();
        assert_eq!((tr.z.nrows(), te.z.nrows()), (1000, 100));
        assert!(means.iter().all(|m| *m == 0.0 || *m == 27.0));
        for d in [&tr, &te] {
            for i in 0..d.z.nrows() {
                let z = [d.z[(i, 0)], d.z[(i, 1)]];
                assert!(z.iter().all(|v| (-0.5..0.5).contains(v)));
                assert_eq!(d.region_labels[i], l2_region(&z));
            }
        }
        assert_eq!((THETA1, THETA2, NOISE_VARIANCE), (9.0, 200.0, 4.0));
    }

    #[test]
    fn nearby_points_have_nearby_draws() {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.1 + 1e-6, 0.2, -0.3, 0.4]);
            let y = draw_region_gp(&z, &[0, 1, 2], &mut rng).unwrap();
            worst = worst.max((y[0] - y[1]).abs());
        }
        assert!(worst < 0.02, "{worst}");
    }

    /// `E[(y(z) − y(z′))²] = 2θ₁(1 − exp(−d²/θ₂))` over 50 seeds.
    #[test]
    fn within_region_covariance_matches_kernel() {
        for d in [0.01, 0.1] {
            let diffs: Vec<f64> = (0..50)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                    let mut z = DMatrix::from_fn(40, 2, |_, _| rng.random_range(-0.5..0.5));
                    z[(1, 0)] = z[(0, 0)] + d;
                    z[(1, 1)] = z[(0, 1)];
                    let idx: Vec<usize> = (0..40).collect();
                    let y = draw_region_gp(&z, &idx, &mut rng).unwrap();
                    (y[0] - y[1]).powi(2)
                })
                .collect();
            let (m, v) = crate::dataset::mean_var(&diffs);
            let want = 2.0 * THETA1 * (1.0 - (-d * d / THETA2).exp());
            let se = (v / 50.0).sqrt();
            assert!((m - want).abs() < 3.0 * se + 0.1 * want, "d={d}: {m} vs {want} (se {se})");
        }
    }

    #[test]
    fn blocked_draws_stay_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2300;
        let z = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-0.5..0.5));
        let idx: Vec<usize> = (0..n).collect();
        let y = draw_region_gp(&z, &idx, &mut rng).unwrap();
        // the field is nearly constant on the unit square
        let (m, v) = crate::dataset::mean_var(y.as_slice());
        assert!(m.is_finite() && v < 0.5, "spread {v}");
    }

    #[test]
    fn lh_partition_examples() {
        for k in [2, 4] {
            for signs in [vec![1.0; k], vec![-1.0; k]] {
                let p = LhPartition { signs };
                let z = vec![0.0; k];
                let f = p.values(&z);
                assert!((f[0] + 0.16).abs() < 1e-15);
                assert!(f[1..].iter().all(|v| (*v - 0.16).abs() < 1e-15));
                assert_eq!(p.region(&z), (1 << (k + 1)) - 2);
            }
        }
        let p = LhPartition { signs: vec![1.0, -1.0, 1.0, 1.0] };
        assert_eq!(p.region(&[0.0; 4]), 30);
        let z = [0.4, 0.0, 0.0, 0.0];
        assert!(p.values(&z)[0].abs() < 1e-15);
        assert_eq!(p.region(&z) & 1, 1);
    }

    #[test]
    fn lh_generation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tr, te, part) = gen_lh(3, 300, 40, &mut rng).unwrap();
        assert_eq!(te.noise_variance, 0.0);
        for i in 0..te.z.nrows() {
            let z = row(&te.z, i);
            assert!(part.near_boundary(&z));
            assert_eq!(te.region_labels[i], part.region(&z));
        }
        for i in 0..tr.z.nrows() {
            assert_eq!(tr.region_labels[i], part.region(&row(&tr.z, i)));
        }
        assert!(gen_lh(1, 10, 10, &mut rng).is_err());
    }

    #[test]
    fn expansion_examples() {
        let z = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let pe = Expansion::Pe { k: 2, d: 5 };
        assert_eq!(pe.apply(&z).as_slice(), &[1.0, 2.0, 1.0, 2.0, 4.0]);
        assert_eq!(monomial_basis(2).len(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Expansion::sample(ExpansionKind::Pe, 2, 20, &mut rng), Err(Error::Input(_))));

        let mut w = DMatrix::zeros(4, 2);
        w[(0, 0)] = 1.0;
        w[(1, 1)] = 1.0;
        let rp = Expansion::Rp { w };
        assert_eq!(rp.apply(&z).as_slice(), &[1.0, 2.0, 0.0, 0.0]);

        let rf = Expansion::sample(ExpansionKind::Rf, 2, 20, &mut rng).unwrap();
        let zs = DMatrix::from_fn(50, 2, |_, _| rng.random_range(-0.5..0.5));
        let bound = (2.0f64 / 20.0).sqrt();
        assert!(rf.apply(&zs).iter().all(|v| v.abs() <= bound + 1e-15));

        let rp = Expansion::sample(ExpansionKind::Rp, 2, 20, &mut rng).unwrap();
        if let Expansion::Rp { w } = &rp {
            assert_eq!(matrix_rank(w), 2);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = GeneratorSpec { expansion: Some((ExpansionKind::Rp, 20)), ..GeneratorSpec::l2() };
        let a = generate(&spec, 7).unwrap();
        let b = generate(&spec, 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!((a.train.len(), a.test.len(), a.train.dim()), (1000, 100, 20));
        let c = generate(&spec, 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    proptest! {
        #[test]
        fn labels_are_a_function_of_z(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, te, part) = gen_lh(2, 20, 5, &mut rng).unwrap();
            for i in 0..te.z.nrows() {
                prop_assert_eq!(te.region_labels[i], part.region(&row(&te.z, i)));
            }
            let z: Vec<f64> = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            prop_assert_eq!(l2_region(&z), l2_region(&z.clone()));
        }
    }
}

//! Scalar reverse-mode automatic differentiation.
//!
//! Numerical code is written once against the [`Real`] trait and runs either
//! on plain `f64` (evaluation) or on [`Var`] (recording onto a [`Tape`] for
//! gradients). A tape is single-threaded; independent work items each get
//! their own tape and their gradients are combined afterwards.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by `f64` and taped variables.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln_1p(self) -> Self;
    /// Sum of a slice as a single operation.
    fn sum(xs: &[Self]) -> Self;
    /// `Σ x_i w_i` with constant weights.
    fn dot_cst(xs: &[Self], w: &[f64]) -> Self;
    /// `Σ x_i y_i`.
    fn dot(xs: &[Self], ys: &[Self]) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn dot_cst(xs: &[Self], w: &[f64]) -> Self {
        xs.iter().zip(w).map(|(a, b)| a * b).sum()
    }
    fn dot(xs: &[Self], ys: &[Self]) -> Self {
        xs.iter().zip(ys).map(|(a, b)| a * b).sum()
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    if x.value() > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log σ(x)` for the logistic sigmoid.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    -softplus(-x)
}

/// `log(e^a + e^b)`.
pub fn logaddexp<T: Real>(a: T, b: T) -> T {
    if a.value() >= b.value() {
        a + softplus(b - a)
    } else {
        b + softplus(a - b)
    }
}

#[derive(Default)]
struct TapeInner {
    /// End offset into `parents` for each node.
    ends: Vec<u32>,
    parents: Vec<(u32, f64)>,
}

/// Recording of elementary operations for reverse accumulation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                ends: Vec::with_capacity(nodes),
                parents: Vec::with_capacity(2 * nodes),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let id = self.push(std::iter::empty());
        Var { val: value, id, tape: Some(self) }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, parents: impl Iterator<Item = (u32, f64)>) -> u32 {
        let mut inner = self.inner.borrow_mut();
        inner.parents.extend(parents);
        let end = inner.parents.len() as u32;
        let id = inner.ends.len() as u32;
        inner.ends.push(end);
        id
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Gradient {
        self.gradient_seeded(&[(output, 1.0)])
    }

    /// Adjoints of every node for the linear functional `Σ seed_i · node_i`.
    pub fn gradient_seeded(&self, seeds: &[(Var<'_>, f64)]) -> Gradient {
        let inner = self.inner.borrow();
        let n = inner.ends.len();
        let mut adj = vec![0.0; n];
        for (v, s) in seeds {
            if v.tape.is_some() {
                adj[v.id as usize] += s;
            }
        }
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let start = if i == 0 { 0 } else { inner.ends[i - 1] as usize };
            let end = inner.ends[i] as usize;
            for &(p, d) in &inner.parents[start..end] {
                adj[p as usize] += a * d;
            }
        }
        Gradient { adj }
    }
}

/// Node adjoints produced by a backward sweep.
pub struct Gradient {
    adj: Vec<f64>,
}

impl Gradient {
    /// Derivative with respect to `v`; zero for constants.
    pub fn wrt(&self, v: &Var<'_>) -> f64 {
        match v.tape {
            Some(_) => self.adj[v.id as usize],
            None => 0.0,
        }
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(v)).collect()
    }
}

/// A scalar recorded on a [`Tape`], or a constant when `tape` is `None`.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    val: f64,
    id: u32,
    tape: Option<&'t Tape>,
}

impl Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.val)
    }
}

impl<'t> Var<'t> {
    pub fn constant(v: f64) -> Self {
        Var { val: v, id: 0, tape: None }
    }

    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => Var { val, id: t.push(std::iter::once((self.id, d))), tape: Some(t) },
        }
    }

    fn binary(self, other: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Var::constant(val),
            (Some(t), None) => Var { val, id: t.push(std::iter::once((self.id, da))), tape: Some(t) },
            (None, Some(t)) => Var { val, id: t.push(std::iter::once((other.id, db))), tape: Some(t) },
            (Some(t), Some(_)) => {
                let id = t.push([(self.id, da), (other.id, db)].into_iter());
                Var { val, id, tape: Some(t) }
            }
        }
    }

    fn nary(val: f64, terms: impl Iterator<Item = (Var<'t>, f64)>) -> Self {
        let mut tape = None;
        let parents: Vec<(u32, f64)> = terms
            .filter_map(|(v, d)| {
                v.tape.map(|t| {
                    tape = Some(t);
                    (v.id, d)
                })
            })
            .collect();
        match tape {
            None => Var::constant(val),
            Some(t) => Var { val, id: t.push(parents.into_iter()), tape: Some(t) },
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.binary(o, q, 1.0 / o.val, -q / o.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        self.unary(self.val + c, 1.0)
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        self.unary(self.val - c, 1.0)
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.unary(self.val * c, c)
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self.unary(self.val / c, 1.0 / c)
    }
}

impl<'t> Real for Var<'t> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(&self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn ln_1p(self) -> Self {
        self.unary(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }
    fn sum(xs: &[Self]) -> Self {
        let val = xs.iter().map(|x| x.val).sum();
        Var::nary(val, xs.iter().map(|&x| (x, 1.0)))
    }
    fn dot_cst(xs: &[Self], w: &[f64]) -> Self {
        let val = xs.iter().zip(w).map(|(x, w)| x.val * w).sum();
        Var::nary(val, xs.iter().zip(w).map(|(&x, &w)| (x, w)))
    }
    fn dot(xs: &[Self], ys: &[Self]) -> Self {
        let val = xs.iter().zip(ys).map(|(x, y)| x.val * y.val).sum();
        Var::nary(
            val,
            xs.iter().zip(ys).flat_map(|(&x, &y)| [(x, y.val), (y, x.val)]),
        )
    }
}

//! Scalar types for plain and derivative-carrying evaluation.
//!
//! All field, map and expression evaluation in this crate is generic over
//! [`Num`]. Instantiating with `f64` gives plain values, [`Dual`] carries
//! first partials with respect to the base coordinates and [`Dual2`] carries
//! the full second-order jet. Black-box fields fall back to central
//! differences through [`fd_jets`].

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{GeomError, Result};

/// Relative step for central differences: `h = FD_STEP * max(1, |x|)`.
pub const FD_STEP: f64 = 1e-5;

/// Scalar usable in generic evaluation, carrying derivatives up to `ORDER`.
pub trait Num:
    Clone + Debug + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    const ORDER: usize;

    fn con(x: f64) -> Self;
    /// The `i`-th coordinate seeded as an independent variable (of `n`).
    fn var(i: usize, x: f64, n: usize) -> Self;
    fn val(&self) -> f64;
    /// Largest magnitude across the value and all derivative components;
    /// used as a convergence measure for iterations in jet arithmetic.
    fn inf_norm(&self) -> f64;
    fn scale(&self, c: f64) -> Self;
    /// Reciprocal; callers must guard `val() != 0`.
    fn recip(&self) -> Self;
    fn powi(&self, k: i32) -> Self;
    fn exp(&self) -> Self;
    /// Natural log; callers must guard `val() > 0`.
    fn ln(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;

    /// Compose a Taylor expansion (w.r.t. the inner function's own
    /// arguments) with argument perturbations `delta = args - base`.
    /// The deltas have zero value part by construction, so the expansion
    /// is exact to `ORDER`.
    fn from_jet(jet: &Jet, delta: &[Self]) -> Self {
        let mut r = Self::con(jet.v);
        if Self::ORDER >= 1 && !jet.g.is_empty() {
            let n = delta.len();
            for (i, d) in delta.iter().enumerate() {
                if jet.g[i] != 0.0 {
                    r = r + d.scale(jet.g[i]);
                }
            }
            if Self::ORDER >= 2 && !jet.h.is_empty() {
                for i in 0..n {
                    for j in 0..n {
                        let c = 0.5 * jet.h[i * n + j];
                        if c != 0.0 {
                            r = r + (delta[i].clone() * delta[j].clone()).scale(c);
                        }
                    }
                }
            }
        }
        r
    }
}

impl Num for f64 {
    const ORDER: usize = 0;

    fn con(x: f64) -> Self {
        x
    }
    fn var(_i: usize, x: f64, _n: usize) -> Self {
        x
    }
    fn val(&self) -> f64 {
        *self
    }
    fn inf_norm(&self) -> f64 {
        self.abs()
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
    fn recip(&self) -> Self {
        1.0 / self
    }
    fn powi(&self, k: i32) -> Self {
        f64::powi(*self, k)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
}

/// Combine two gradient vectors entrywise; an empty vector stands for zero.
fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.is_empty() && b.is_empty() {
        return Vec::new();
    }
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            f(
                a.get(i).copied().unwrap_or(0.0),
                b.get(i).copied().unwrap_or(0.0),
            )
        })
        .collect()
}

fn get(a: &[f64], i: usize) -> f64 {
    a.get(i).copied().unwrap_or(0.0)
}

/// First-order forward-mode dual number with a gradient block.
///
/// An empty `g` means "all partials zero"; this lets constants stay cheap
/// without threading the variable count everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub g: Vec<f64>,
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual {
            v: self.v + o.v,
            g: zip(&self.g, &o.g, |x, y| x + y),
        }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual {
            v: self.v - o.v,
            g: zip(&self.g, &o.g, |x, y| x - y),
        }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual {
            v: self.v * o.v,
            g: zip(&self.g, &o.g, |x, y| self.v * y + o.v * x),
        }
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Dual {
            v: -self.v,
            g: self.g.iter().map(|x| -x).collect(),
        }
    }
}

impl Dual {
    /// Chain rule through a unary function with derivative `d1` at `self.v`.
    fn chain(&self, v: f64, d1: f64) -> Self {
        Dual {
            v,
            g: self.g.iter().map(|x| d1 * x).collect(),
        }
    }
}

impl Num for Dual {
    const ORDER: usize = 1;

    fn con(x: f64) -> Self {
        Dual { v: x, g: Vec::new() }
    }
    fn var(i: usize, x: f64, n: usize) -> Self {
        let mut g = vec![0.0; n];
        g[i] = 1.0;
        Dual { v: x, g }
    }
    fn val(&self) -> f64 {
        self.v
    }
    fn inf_norm(&self) -> f64 {
        self.g
            .iter()
            .map(|x| x.abs())
            .fold(self.v.abs(), f64::max)
    }
    fn scale(&self, c: f64) -> Self {
        Dual {
            v: self.v * c,
            g: self.g.iter().map(|x| c * x).collect(),
        }
    }
    fn recip(&self) -> Self {
        self.chain(1.0 / self.v, -1.0 / (self.v * self.v))
    }
    fn powi(&self, k: i32) -> Self {
        match k {
            0 => Self::con(1.0),
            _ => self.chain(self.v.powi(k), k as f64 * self.v.powi(k - 1)),
        }
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(&self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn sin(&self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(&self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
}

/// Second-order jet: value, gradient, and dense Hessian (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Dual2 {
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl Add for Dual2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual2 {
            v: self.v + o.v,
            g: zip(&self.g, &o.g, |x, y| x + y),
            h: zip(&self.h, &o.h, |x, y| x + y),
        }
    }
}

impl Sub for Dual2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual2 {
            v: self.v - o.v,
            g: zip(&self.g, &o.g, |x, y| x - y),
            h: zip(&self.h, &o.h, |x, y| x - y),
        }
    }
}

impl Mul for Dual2 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let n = self.g.len().max(o.g.len());
        let mut h = zip(&self.h, &o.h, |x, y| self.v * y + o.v * x);
        if n > 0 && (!self.g.is_empty() || !o.g.is_empty()) {
            if h.is_empty() {
                h = vec![0.0; n * n];
            }
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += get(&self.g, i) * get(&o.g, j) + get(&o.g, i) * get(&self.g, j);
                }
            }
        }
        Dual2 {
            v: self.v * o.v,
            g: zip(&self.g, &o.g, |x, y| self.v * y + o.v * x),
            h,
        }
    }
}

impl Neg for Dual2 {
    type Output = Self;
    fn neg(self) -> Self {
        Dual2 {
            v: -self.v,
            g: self.g.iter().map(|x| -x).collect(),
            h: self.h.iter().map(|x| -x).collect(),
        }
    }
}

impl Dual2 {
    /// Chain rule through a unary function with first and second
    /// derivatives `d1`, `d2` at `self.v`.
    fn chain(&self, v: f64, d1: f64, d2: f64) -> Self {
        let n = self.g.len();
        let mut h: Vec<f64> = self.h.iter().map(|x| d1 * x).collect();
        if n > 0 && d2 != 0.0 {
            if h.is_empty() {
                h = vec![0.0; n * n];
            }
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += d2 * self.g[i] * self.g[j];
                }
            }
        }
        Dual2 {
            v,
            g: self.g.iter().map(|x| d1 * x).collect(),
            h,
        }
    }
}

impl Num for Dual2 {
    const ORDER: usize = 2;

    fn con(x: f64) -> Self {
        Dual2 {
            v: x,
            g: Vec::new(),
            h: Vec::new(),
        }
    }
    fn var(i: usize, x: f64, n: usize) -> Self {
        let mut g = vec![0.0; n];
        g[i] = 1.0;
        Dual2 {
            v: x,
            g,
            h: vec![0.0; n * n],
        }
    }
    fn val(&self) -> f64 {
        self.v
    }
    fn inf_norm(&self) -> f64 {
        let g = self.g.iter().map(|x| x.abs()).fold(self.v.abs(), f64::max);
        self.h.iter().map(|x| x.abs()).fold(g, f64::max)
    }
    fn scale(&self, c: f64) -> Self {
        Dual2 {
            v: self.v * c,
            g: self.g.iter().map(|x| c * x).collect(),
            h: self.h.iter().map(|x| c * x).collect(),
        }
    }
    fn recip(&self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }
    fn powi(&self, k: i32) -> Self {
        match k {
            0 => Self::con(1.0),
            1 => self.clone(),
            _ => self.chain(
                self.v.powi(k),
                k as f64 * self.v.powi(k - 1),
                (k * (k - 1)) as f64 * self.v.powi(k - 2),
            ),
        }
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn ln(&self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }
    fn sin(&self) -> Self {
        self.chain(self.v.sin(), self.v.cos(), -self.v.sin())
    }
    fn cos(&self) -> Self {
        self.chain(self.v.cos(), -self.v.sin(), -self.v.cos())
    }
}

/// Taylor data of a scalar function of `n` arguments at a base point:
/// value, gradient (`n`), Hessian (`n^2`) and third-order tensor (`n^3`).
/// Trailing blocks may be empty when the requested order did not need them.
#[derive(Clone, Debug)]
pub struct Jet {
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub t: Vec<f64>,
}

impl Jet {
    /// The jet of the `i`-th partial derivative, one order lower.
    pub fn partial(&self, i: usize, n: usize) -> Jet {
        Jet {
            v: get(&self.g, i),
            g: if self.h.is_empty() {
                Vec::new()
            } else {
                self.h[i * n..(i + 1) * n].to_vec()
            },
            h: if self.t.is_empty() {
                Vec::new()
            } else {
                self.t[i * n * n..(i + 1) * n * n].to_vec()
            },
            t: Vec::new(),
        }
    }
}

/// A multi-output function evaluable at any of the three scalar types.
pub(crate) trait GenericFn {
    fn call_f64(&self, q: &[f64]) -> Result<Vec<f64>>;
    fn call_dual(&self, q: &[Dual]) -> Result<Vec<Dual>>;
    fn call_dual2(&self, q: &[Dual2]) -> Result<Vec<Dual2>>;
}

fn fd_steps(q: &[f64]) -> Vec<f64> {
    q.iter().map(|x| FD_STEP * x.abs().max(1.0)).collect()
}

/// Jets of `f` at `q`, exact through order 2 (forward AD) and via central
/// differences of the second-order jet at order 3.
pub(crate) fn jets(f: &dyn GenericFn, q: &[f64], order: usize) -> Result<Vec<Jet>> {
    let n = q.len();
    match order {
        0 => Ok(f
            .call_f64(q)?
            .into_iter()
            .map(|v| Jet {
                v,
                g: Vec::new(),
                h: Vec::new(),
                t: Vec::new(),
            })
            .collect()),
        1 => {
            let seeded: Vec<Dual> = q.iter().enumerate().map(|(i, &x)| Dual::var(i, x, n)).collect();
            Ok(f.call_dual(&seeded)?
                .into_iter()
                .map(|d| Jet {
                    v: d.v,
                    g: pad(d.g, n),
                    h: Vec::new(),
                    t: Vec::new(),
                })
                .collect())
        }
        2 => {
            let seeded: Vec<Dual2> = q.iter().enumerate().map(|(i, &x)| Dual2::var(i, x, n)).collect();
            Ok(f.call_dual2(&seeded)?
                .into_iter()
                .map(|d| Jet {
                    v: d.v,
                    g: pad(d.g, n),
                    h: pad(d.h, n * n),
                    t: Vec::new(),
                })
                .collect())
        }
        3 => {
            let mut base = jets(f, q, 2)?;
            let steps = fd_steps(q);
            let m = base.len();
            let mut tensors = vec![vec![0.0; n * n * n]; m];
            for l in 0..n {
                let mut qp = q.to_vec();
                qp[l] += steps[l];
                let mut qm = q.to_vec();
                qm[l] -= steps[l];
                let jp = jets(f, &qp, 2)?;
                let jm = jets(f, &qm, 2)?;
                for out in 0..m {
                    for ij in 0..n * n {
                        tensors[out][ij * n + l] =
                            (jp[out].h[ij] - jm[out].h[ij]) / (2.0 * steps[l]);
                    }
                }
            }
            for (out, jet) in base.iter_mut().enumerate() {
                jet.t = std::mem::take(&mut tensors[out]);
            }
            Ok(base)
        }
        _ => Err(GeomError::DerivativeOrder { order }),
    }
}

fn pad(v: Vec<f64>, n: usize) -> Vec<f64> {
    if v.is_empty() {
        vec![0.0; n]
    } else {
        v
    }
}

/// Finite-difference jets for black-box (f64-only) functions.
pub(crate) fn fd_jets(
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    q: &[f64],
    order: usize,
) -> Result<Vec<Jet>> {
    let n = q.len();
    let v0 = f(q)?;
    let m = v0.len();
    let mut out: Vec<Jet> = v0
        .into_iter()
        .map(|v| Jet {
            v,
            g: Vec::new(),
            h: Vec::new(),
            t: Vec::new(),
        })
        .collect();
    if order == 0 {
        return Ok(out);
    }
    let steps = fd_steps(q);
    let shifted = |q: &[f64], i: usize, s: f64| -> Vec<f64> {
        let mut p = q.to_vec();
        p[i] += s;
        p
    };
    let mut plus = Vec::with_capacity(n);
    let mut minus = Vec::with_capacity(n);
    for i in 0..n {
        plus.push(f(&shifted(q, i, steps[i]))?);
        minus.push(f(&shifted(q, i, -steps[i]))?);
    }
    for (k, jet) in out.iter_mut().enumerate() {
        jet.g = (0..n)
            .map(|i| (plus[i][k] - minus[i][k]) / (2.0 * steps[i]))
            .collect();
    }
    if order == 1 {
        return Ok(out);
    }
    if order > 2 {
        return Err(GeomError::DerivativeOrder { order });
    }
    let mut h = vec![vec![0.0; n * n]; m];
    for i in 0..n {
        for k in 0..m {
            h[k][i * n + i] = (plus[i][k] - 2.0 * out[k].v + minus[i][k]) / (steps[i] * steps[i]);
        }
        for j in 0..i {
            let pp = f(&shifted(&shifted(q, i, steps[i]), j, steps[j]))?;
            let pm = f(&shifted(&shifted(q, i, steps[i]), j, -steps[j]))?;
            let mp = f(&shifted(&shifted(q, i, -steps[i]), j, steps[j]))?;
            let mm = f(&shifted(&shifted(q, i, -steps[i]), j, -steps[j]))?;
            for k in 0..m {
                let v = (pp[k] - pm[k] - mp[k] + mm[k]) / (4.0 * steps[i] * steps[j]);
                h[k][i * n + j] = v;
                h[k][j * n + i] = v;
            }
        }
    }
    for (k, jet) in out.iter_mut().enumerate() {
        jet.h = std::mem::take(&mut h[k]);
    }
    Ok(out)
}

/// Solve a dense `n x n` system by Gaussian elimination with partial
/// pivoting, in generic scalar arithmetic (pivoting decided on values).
pub(crate) fn solve_linear<T: Num>(a: &[T], b: &[T], n: usize, context: &'static str) -> Result<Vec<T>> {
    let mut m: Vec<T> = a.to_vec();
    let mut rhs: Vec<T> = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, m[perm[r] * n + col].val().abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if pivot_abs < 1e-300 {
            return Err(GeomError::SingularMatrix {
                context,
                pivot: pivot_abs,
            });
        }
        perm.swap(col, pivot_row);
        let prow = perm[col];
        let inv = m[prow * n + col].recip();
        for r in col + 1..n {
            let row = perm[r];
            let factor = m[row * n + col].clone() * inv.clone();
            for c in col..n {
                m[row * n + c] = m[row * n + c].clone() - factor.clone() * m[prow * n + c].clone();
            }
            rhs[row] = rhs[row].clone() - factor * rhs[prow].clone();
        }
    }
    let mut x = vec![T::con(0.0); n];
    for col in (0..n).rev() {
        let row = perm[col];
        let mut acc = rhs[row].clone();
        for c in col + 1..n {
            acc = acc - m[row * n + c].clone() * x[c].clone();
        }
        x[col] = acc * m[row * n + col].recip();
    }
    Ok(x)
}

/// Determinant by cofactor expansion. Division-free so that derivative
/// information survives vanishing minors; fine for the small sizes here.
pub(crate) fn det_cofactor<T: Num>(m: &[T], n: usize) -> T {
    match n {
        0 => T::con(1.0),
        1 => m[0].clone(),
        2 => m[0].clone() * m[3].clone() - m[1].clone() * m[2].clone(),
        _ => {
            let mut acc = T::con(0.0);
            for j in 0..n {
                let mut sub = Vec::with_capacity((n - 1) * (n - 1));
                for r in 1..n {
                    for c in 0..n {
                        if c != j {
                            sub.push(m[r * n + c].clone());
                        }
                    }
                }
                let term = m[j].clone() * det_cofactor(&sub, n - 1);
                acc = if j % 2 == 0 { acc + term } else { acc - term };
            }
            acc
        }
    }
}

/// Pairwise summation, so that parallel or reordered reductions reproduce.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn seed2(x: f64, y: f64) -> Vec<Dual2> {
        vec![Dual2::var(0, x, 2), Dual2::var(1, y, 2)]
    }

    #[test]
    fn dual2_product_hessian() {
        // f = x^2 * sin(y)
        let p = seed2(1.3, 0.7);
        let f = p[0].powi(2) * p[1].sin();
        assert_relative_eq!(f.v, 1.3f64.powi(2) * 0.7f64.sin(), max_relative = 1e-14);
        assert_relative_eq!(f.g[0], 2.0 * 1.3 * 0.7f64.sin(), max_relative = 1e-14);
        assert_relative_eq!(f.g[1], 1.3f64.powi(2) * 0.7f64.cos(), max_relative = 1e-14);
        assert_relative_eq!(f.h[0], 2.0 * 0.7f64.sin(), max_relative = 1e-14);
        assert_relative_eq!(f.h[1], 2.0 * 1.3 * 0.7f64.cos(), max_relative = 1e-14);
        assert_relative_eq!(f.h[3], -1.3f64.powi(2) * 0.7f64.sin(), max_relative = 1e-14);
    }

    #[test]
    fn from_jet_composes_second_order() {
        // inner function f(u) = u^3 expanded at u0 = 2, composed with u = x*y.
        let u0 = 2.0;
        let jet = Jet {
            v: u0.powi(3),
            g: vec![3.0 * u0 * u0],
            h: vec![6.0 * u0],
            t: Vec::new(),
        };
        let p = seed2(2.0, 1.0); // x*y = 2 = u0
        let u = p[0].clone() * p[1].clone();
        let delta = vec![u - Dual2::con(u0)];
        let composed = Dual2::from_jet(&jet, &delta);
        // direct computation of (x*y)^3
        let direct = (p[0].clone() * p[1].clone()).powi(3);
        assert_relative_eq!(composed.v, direct.v, max_relative = 1e-14);
        for i in 0..2 {
            assert_relative_eq!(composed.g[i], direct.g[i], max_relative = 1e-13);
        }
        for i in 0..4 {
            assert_relative_eq!(composed.h[i], direct.h[i], max_relative = 1e-13);
        }
    }

    #[test]
    fn solve_linear_residual() {
        let a = vec![0.0, 1.0, 3.0, -1.0, 0.5, 2.0, -3.0, -2.0, 1.0];
        let b = vec![1.0, -2.0, 0.5];
        let x = solve_linear::<f64>(&a, &b, 3, "test").unwrap();
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum::<f64>() - b[i];
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn det_matches_known() {
        let m = vec![2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        assert_relative_eq!(det_cofactor::<f64>(&m, 3), 8.0, max_relative = 1e-14);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert_relative_eq!(pairwise_sum(&xs), naive, max_relative = 1e-12);
    }
}

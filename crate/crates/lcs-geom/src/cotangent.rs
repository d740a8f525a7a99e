//! Cotangent local models: the Haller-Rybicki LCS form on `T*Q`, the
//! metric identification of a Lagrangian's normal bundle with `T*Q`, the
//! fiberwise linear normalization, and the Weinstein-type pipeline that
//! composes them with the Darboux-Weinstein flow.

use std::fmt::Debug;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GeomError, Result};
use crate::expr::parse;
use crate::forms::{
    nondegeneracy, pullback_value, CustomMap, KFormField, MetricField, NumDispatch, SmoothMap,
};
use crate::lcs::{check_lcs, LcsStructure, LcsTolerances};
use crate::moser::{darboux_weinstein, DwInput, DwResult, DwTolerances};
use crate::num::{solve_linear, Num};
use crate::report::{CheckResult, VerificationReport};
use crate::tube::TubularModel;

fn stage<V>(name: &'static str, r: Result<V>) -> Result<V> {
    r.map_err(|e| GeomError::Stage {
        stage: name,
        source: Box::new(e),
    })
}

// ---------------------------------------------------------------------------
// Cotangent model
// ---------------------------------------------------------------------------

/// A cotangent-bundle coordinate model `T*Q` over a `k`-dimensional base
/// box: coordinates `(x1..xk, p1..pk)`, projection `(x, p) -> x`, zero
/// section `{p = 0}`. Periodic base directions are metadata; computation
/// happens on the covering box.
#[derive(Debug, Clone)]
pub struct CotangentModel {
    pub base_dim: usize,
    pub base_box_min: Vec<f64>,
    pub base_box_max: Vec<f64>,
    pub base_periodic: Vec<bool>,
}

impl CotangentModel {
    pub fn new(
        base_dim: usize,
        base_box_min: Vec<f64>,
        base_box_max: Vec<f64>,
        base_periodic: Vec<bool>,
    ) -> Result<Self> {
        if base_dim == 0 {
            return Err(GeomError::InvalidInput("base dimension must be > 0".into()));
        }
        if base_box_min.len() != base_dim
            || base_box_max.len() != base_dim
            || base_periodic.len() != base_dim
        {
            return Err(GeomError::InvalidInput(
                "base box min/max/periodic lengths disagree with the base dimension".into(),
            ));
        }
        Ok(CotangentModel {
            base_dim,
            base_box_min,
            base_box_max,
            base_periodic,
        })
    }

    /// Total dimension `2k` of the model patch.
    pub fn dim(&self) -> usize {
        2 * self.base_dim
    }

    /// The bundle projection `pi(x, p) = x` as a linear map.
    pub fn projection(&self) -> SmoothMap {
        let k = self.base_dim;
        let n = 2 * k;
        let mut a = vec![0.0; k * n];
        for i in 0..k {
            a[i * n + i] = 1.0;
        }
        SmoothMap::linear(k, n, a, vec![0.0; k]).expect("projection shape")
    }

    /// The zero-section inclusion `x -> (x, 0)` as a linear map.
    pub fn zero_section(&self) -> SmoothMap {
        let k = self.base_dim;
        let n = 2 * k;
        let mut a = vec![0.0; n * k];
        for i in 0..k {
            a[i * k + i] = 1.0;
        }
        SmoothMap::linear(n, k, a, vec![0.0; n]).expect("zero section shape")
    }

    /// A uniform grid on the base box.
    pub fn base_grid(&self, per_dim: usize) -> Vec<Vec<f64>> {
        let mut pts = vec![Vec::new()];
        for a in 0..self.base_dim {
            let (lo, hi) = (self.base_box_min[a], self.base_box_max[a]);
            let mut next = Vec::new();
            for base in &pts {
                for i in 0..per_dim {
                    let frac = (i as f64 + 0.5) / per_dim as f64;
                    let mut p = base.clone();
                    p.push(lo + frac * (hi - lo));
                    next.push(p);
                }
            }
            pts = next;
        }
        pts
    }

    /// Deterministic pseudo-random model points `(x, p)` with `x` in the
    /// base box and `|p_i| <= p_radius`.
    pub fn sample_points(&self, count: usize, p_radius: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut pt = Vec::with_capacity(self.dim());
                for a in 0..self.base_dim {
                    pt.push(rng.gen_range(self.base_box_min[a]..self.base_box_max[a]));
                }
                for _ in 0..self.base_dim {
                    pt.push(rng.gen_range(-p_radius..p_radius));
                }
                pt
            })
            .collect()
    }
}

/// The Liouville 1-form `eta = sum_i p_i dx^i` on the model patch.
pub fn liouville(model: &CotangentModel) -> KFormField {
    let k = model.base_dim;
    let n = 2 * k;
    let entries: Vec<(Vec<usize>, crate::expr::Expr)> = (0..k)
        .map(|i| {
            (
                vec![i + 1],
                parse(&format!("p{}", i + 1), n).expect("liouville coefficient"),
            )
        })
        .collect();
    KFormField::from_exprs(n, 1, &entries).expect("liouville form")
}

// ---------------------------------------------------------------------------
// Haller-Rybicki form
// ---------------------------------------------------------------------------

/// Tolerances of the cotangent-model constructions and checks.
#[derive(Debug, Clone, Copy)]
pub struct CotangentTolerances {
    pub closed: f64,
    pub lcs: f64,
    /// Closedness of the rescaled form when the base Lee form is exact.
    pub gcs: f64,
    /// Tangent-pair contraction on Lagrangian submanifolds and sections.
    pub lagrangian: f64,
    /// Additivity/homogeneity of the fiber identification.
    pub linearity: f64,
    /// Coefficient agreement on `T_qM` after the linear normalization.
    pub normalization: f64,
}

impl Default for CotangentTolerances {
    fn default() -> Self {
        CotangentTolerances {
            closed: 1e-8,
            lcs: 1e-8,
            gcs: 1e-7,
            lagrangian: 1e-10,
            linearity: 1e-12,
            normalization: 1e-8,
        }
    }
}

/// The twisted cotangent 2-form `omega_theta = d eta - pi^* theta ^ eta`,
/// LCS with Lee form `pi^* theta` and Lagrangian zero section.
#[derive(Debug, Clone)]
pub struct HallerRybickiForm {
    pub model: CotangentModel,
    /// The closed Lee 1-form on the base.
    pub theta: KFormField,
    pub eta: KFormField,
    pub omega_theta: KFormField,
    /// `pi^* theta`, the Lee form of `omega_theta` on the model patch.
    pub lee: KFormField,
}

/// Builds the Haller-Rybicki form; `theta` must be a closed 1-form on the
/// base (closedness sampled on a base grid).
pub fn hr_form(
    model: &CotangentModel,
    theta: &KFormField,
    tol: &CotangentTolerances,
) -> Result<HallerRybickiForm> {
    let k = model.base_dim;
    if theta.n() != k {
        return Err(GeomError::DimensionMismatch {
            context: "base Lee form",
            expected: k,
            got: theta.n(),
        });
    }
    if theta.k() != 1 {
        return Err(GeomError::DegreeMismatch {
            context: "base Lee form",
            expected: 1,
            got: theta.k(),
        });
    }
    let dtheta = theta.d();
    let mut worst = 0.0f64;
    for x in model.base_grid(8) {
        worst = worst.max(dtheta.value(&x)?.max_abs());
    }
    if worst > tol.closed {
        return Err(GeomError::NotClosed {
            name: "base-lee-closed",
            residual: worst,
            tolerance: tol.closed,
        });
    }
    let eta = liouville(model);
    let lee = KFormField::pullback(&model.projection(), theta)?;
    let omega_theta = eta.d().sub(&lee.wedge(&eta)?)?;
    Ok(HallerRybickiForm {
        model: model.clone(),
        theta: theta.clone(),
        eta,
        omega_theta,
        lee,
    })
}

impl HallerRybickiForm {
    /// Checks the built form: LCS with Lee form `pi^* theta` on the given
    /// model samples, nondegenerate there, and Lagrangian zero section on
    /// a base grid.
    pub fn verify(
        &self,
        samples: &[Vec<f64>],
        tol: &CotangentTolerances,
    ) -> Result<VerificationReport> {
        let s = LcsStructure::new(self.omega_theta.clone(), self.lee.clone())?;
        let lcs_tol = LcsTolerances {
            closed: tol.closed,
            lcs: tol.lcs,
            ..LcsTolerances::default()
        };
        let mut report = check_lcs(&s, samples, &lcs_tol)?;
        report.pipeline = "hr-form".to_string();
        report.push(zero_section_lagrangian(
            &self.model,
            &self.omega_theta,
            &self.model.base_grid(8),
            tol.lagrangian,
        )?);
        Ok(report)
    }
}

/// Contraction of a model 2-form with pairs of zero-section tangent
/// vectors `(d/dx^i, d/dx^j)` at `p = 0`, which must vanish.
pub fn zero_section_lagrangian(
    model: &CotangentModel,
    form: &KFormField,
    base_samples: &[Vec<f64>],
    tolerance: f64,
) -> Result<CheckResult> {
    let k = model.base_dim;
    let n = 2 * k;
    if form.n() != n || form.k() != 2 {
        return Err(GeomError::DimensionMismatch {
            context: "zero-section check",
            expected: n,
            got: form.n(),
        });
    }
    let mut residuals = Vec::new();
    for x in base_samples {
        let mut pt = x.clone();
        pt.resize(n, 0.0);
        let w = form.value(&pt)?;
        for i in 0..k {
            for j in (i + 1)..k {
                let mut ei = vec![0.0; n];
                ei[i] = 1.0;
                let mut ej = vec![0.0; n];
                ej[j] = 1.0;
                residuals.push(w.apply(&[ei, ej])?.abs());
            }
        }
    }
    Ok(CheckResult::from_residuals(
        "zero-section-lagrangian",
        &residuals,
        tolerance,
    ))
}

/// Closedness residual of `e^{-f o pi} omega_theta` at the given model
/// samples; small when the base Lee form is `df` (the GCS direction).
pub fn gcs_residual(
    hr: &HallerRybickiForm,
    f_base: &KFormField,
    samples: &[Vec<f64>],
) -> Result<f64> {
    if f_base.k() != 0 || f_base.n() != hr.model.base_dim {
        return Err(GeomError::DegreeMismatch {
            context: "GCS potential",
            expected: 0,
            got: f_base.k(),
        });
    }
    let f_pi = KFormField::pullback(&hr.model.projection(), f_base)?;
    let rescaled = hr.omega_theta.exp_scale(&f_pi, -1.0)?;
    let d = rescaled.d();
    let mut worst = 0.0f64;
    for p in samples {
        worst = worst.max(d.value(p)?.max_abs());
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Normal-bundle / cotangent identification
// ---------------------------------------------------------------------------

/// Shared solve: given the skew matrix of `omega` and the metric matrix at
/// a footpoint, map an ambient offset `v` to the covector coefficients
/// `w*_a = g(w, t_a)` where `g(v, .) = omega(w, .)` and `t_a` is the
/// tangent frame.
fn fiber_covector_kernel<T: Num>(
    a: &[T],
    g: &[T],
    tangents: &[Vec<T>],
    v: &[T],
    n: usize,
) -> Result<Vec<T>> {
    // omega(w, .) = w^T A, so the system is A^T w = G v.
    let mut at = vec![T::con(0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            at[i * n + j] = a[j * n + i].clone();
        }
    }
    let mut rhs = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = T::con(0.0);
        for j in 0..n {
            acc = acc + g[i * n + j].clone() * v[j].clone();
        }
        rhs.push(acc);
    }
    let w = solve_linear(&at, &rhs, n, "cotangent identification")?;
    let mut wstar = Vec::with_capacity(tangents.len());
    for t in tangents {
        let mut acc = T::con(0.0);
        for i in 0..n {
            for j in 0..n {
                acc = acc + w[i].clone() * g[i * n + j].clone() * t[j].clone();
            }
        }
        wstar.push(acc);
    }
    Ok(wstar)
}

/// One fiber of the identification at a chart sample.
#[derive(Debug, Clone)]
pub struct IdentSample {
    pub u: Vec<f64>,
    pub q: Vec<f64>,
    /// Column `j` holds the covector coefficients of the `j`-th normal
    /// frame vector; row-major `param_dim x param_dim`.
    pub fiber_matrix: Vec<f64>,
    /// Smallest singular value of the fiber matrix.
    pub margin: f64,
}

/// The identification `(q, v) -> (q, w*)` of the normal bundle of a
/// Lagrangian `Q` with `T*Q`, built from `g(v, .) = omega(w, .)` and
/// `w* = g(w, .)` restricted to `T_qQ`.
pub struct LagrangianIdentification {
    pub omega: KFormField,
    pub metric: MetricField,
    pub tube: TubularModel,
    pub samples: Vec<IdentSample>,
}

impl Debug for LagrangianIdentification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LagrangianIdentification(samples={})", self.samples.len())
    }
}

pub fn identify_normal_cotangent(
    omega: &KFormField,
    metric: &MetricField,
    tube: &TubularModel,
    chart_samples: &[Vec<f64>],
    tol: &CotangentTolerances,
) -> Result<LagrangianIdentification> {
    let sub = &tube.submanifold;
    let n = sub.ambient_dim;
    let m = sub.param_dim;
    if omega.n() != n || omega.k() != 2 {
        return Err(GeomError::DimensionMismatch {
            context: "identification 2-form",
            expected: n,
            got: omega.n(),
        });
    }
    if n != 2 * m {
        return Err(GeomError::Hypothesis {
            name: "lagrangian-dimension".to_string(),
            detail: format!("dim Q = {m} is not half of dim M = {n}"),
        });
    }
    let mut samples = Vec::with_capacity(chart_samples.len());
    for u in chart_samples {
        let q = sub.embed(u)?;
        let w = omega.value(&q)?;
        let tangents = sub.tangent_frame(u)?;
        // The Lagrangian condition is the key point of the identification.
        for i in 0..m {
            for j in (i + 1)..m {
                let scale = norm(&tangents[i]) * norm(&tangents[j]);
                let pair = w.apply(&[tangents[i].clone(), tangents[j].clone()])?;
                if pair.abs() > tol.lagrangian * scale.max(1e-300) {
                    return Err(GeomError::Hypothesis {
                        name: "q-lagrangian".to_string(),
                        detail: format!(
                            "omega(t{i}, t{j}) = {pair:.3e} at chart point {u:?}"
                        ),
                    });
                }
            }
        }
        let a = crate::forms::skew_matrix(n, &w.coeffs);
        let g = metric.value(&q)?;
        let normals = sub.normal_frame(u)?;
        let mut fiber = vec![0.0; m * m];
        for (j, v) in normals.iter().enumerate() {
            let wstar = fiber_covector_kernel(&a, &g, &tangents, v, n)?;
            for (i, c) in wstar.iter().enumerate() {
                fiber[i * m + j] = *c;
            }
        }
        let mat = nalgebra::DMatrix::from_row_slice(m, m, &fiber);
        let margin = mat
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if margin < 1e-12 {
            return Err(GeomError::SingularMatrix {
                context: "identification fiber map",
                pivot: margin,
            });
        }
        samples.push(IdentSample {
            u: u.clone(),
            q,
            fiber_matrix: fiber,
            margin,
        });
    }
    Ok(LagrangianIdentification {
        omega: omega.clone(),
        metric: metric.clone(),
        tube: tube.clone(),
        samples,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl LagrangianIdentification {
    /// Covector coefficients of an ambient offset `v` over the chart point
    /// `u` (the linearity probe used by the invariant tests).
    pub fn fiber_covector(&self, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let sub = &self.tube.submanifold;
        let n = sub.ambient_dim;
        let q = sub.embed(u)?;
        let a = crate::forms::skew_matrix(n, &self.omega.value(&q)?.coeffs);
        let g = self.metric.value(&q)?;
        let tangents = sub.tangent_frame(u)?;
        fiber_covector_kernel(&a, &g, &tangents, v, n)
    }

    /// The composite chart `(ambient tube point) -> (u, w*)` into the
    /// cotangent model coordinates, differentiable in jet arithmetic.
    pub fn chart(&self) -> SmoothMap {
        SmoothMap::custom(Arc::new(CotangentChartMap {
            tube: self.tube.clone(),
            omega: self.omega.clone(),
            metric: self.metric.clone(),
        }))
    }
}

struct CotangentChartMap {
    tube: TubularModel,
    omega: KFormField,
    metric: MetricField,
}

impl Debug for CotangentChartMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CotangentChartMap")
    }
}

impl CotangentChartMap {
    fn eval_generic<T: NumDispatch>(&self, p: &[T]) -> Result<Vec<T>> {
        let sub = &self.tube.submanifold;
        let n = sub.ambient_dim;
        let m = sub.param_dim;
        let c = self.tube.coords_num(p)?;
        let a = crate::forms::skew_matrix(n, &self.omega.eval_num(&c.q)?);
        let g = self.metric.eval_num(&c.q)?;
        let tangents = tangent_frame_num(sub, &c.u)?;
        let wstar = fiber_covector_kernel(&a, &g, &tangents, &c.v, n)?;
        let mut out = Vec::with_capacity(2 * m);
        out.extend(c.u);
        out.extend(wstar);
        Ok(out)
    }
}

/// Tangent frame at a chart point in generic arithmetic, from embedding
/// jets of one order above the scalar's.
fn tangent_frame_num<T: Num>(
    sub: &crate::tube::SubmanifoldModel,
    u: &[T],
) -> Result<Vec<Vec<T>>> {
    let m = sub.param_dim;
    let base_u: Vec<f64> = u.iter().map(|x| x.val()).collect();
    let js = sub.embed_jets(&base_u, T::ORDER + 1)?;
    let delta: Vec<T> = u
        .iter()
        .zip(&base_u)
        .map(|(x, &b)| x.clone() - T::con(b))
        .collect();
    Ok((0..m)
        .map(|a| {
            js.iter()
                .map(|j| T::from_jet(&j.partial(a, m), &delta))
                .collect()
        })
        .collect())
}

impl CustomMap for CotangentChartMap {
    fn n_in(&self) -> usize {
        self.tube.submanifold.ambient_dim
    }
    fn n_out(&self) -> usize {
        2 * self.tube.submanifold.param_dim
    }
    fn eval_f64(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.eval_generic(p)
    }
    fn eval_dual(&self, p: &[crate::num::Dual]) -> Result<Vec<crate::num::Dual>> {
        self.eval_generic(p)
    }
    fn eval_dual2(&self, p: &[crate::num::Dual2]) -> Result<Vec<crate::num::Dual2>> {
        self.eval_generic(p)
    }
}

/// The model form transported to the ambient tube through the chart.
#[derive(Debug, Clone)]
pub struct TransportedForm {
    pub chart: SmoothMap,
    /// Pullback of `omega_theta` by the chart, a 2-form on the tube.
    pub form: KFormField,
    /// Pullback of `pi^* theta`, the transported Lee form.
    pub lee: KFormField,
}

pub fn transport_form(
    hr: &HallerRybickiForm,
    ident: &LagrangianIdentification,
) -> Result<TransportedForm> {
    let m = ident.tube.submanifold.param_dim;
    if hr.model.base_dim != m {
        return Err(GeomError::DimensionMismatch {
            context: "transport base dimension",
            expected: m,
            got: hr.model.base_dim,
        });
    }
    let chart = ident.chart();
    let form = KFormField::pullback(&chart, &hr.omega_theta)?;
    let lee = KFormField::pullback(&chart, &hr.lee)?;
    Ok(TransportedForm { chart, form, lee })
}

// ---------------------------------------------------------------------------
// Lagrangian linear normalization
// ---------------------------------------------------------------------------

/// For a 2-form with skew matrix `A` and a Lagrangian tangent frame `T`,
/// the dual-normalized Lagrangian complement: columns `B` with
/// `T^T A B = I` and `B^T A B = 0`.
fn lagrangian_complement<T: Num>(
    a: &[T],
    tangents: &[Vec<T>],
    n: usize,
    m: usize,
) -> Result<Vec<Vec<T>>> {
    // M = T^T A, the pairing rows.
    let mut mm = vec![T::con(0.0); m * n];
    for r in 0..m {
        for j in 0..n {
            let mut acc = T::con(0.0);
            for i in 0..n {
                acc = acc + tangents[r][i].clone() * a[i * n + j].clone();
            }
            mm[r * n + j] = acc;
        }
    }
    // W = M M^T and its inverse K, so B0 = M^T K has T^T A B0 = I.
    let mut w = vec![T::con(0.0); m * m];
    for r in 0..m {
        for s in 0..m {
            let mut acc = T::con(0.0);
            for j in 0..n {
                acc = acc + mm[r * n + j].clone() * mm[s * n + j].clone();
            }
            w[r * m + s] = acc;
        }
    }
    let mut k_inv = vec![T::con(0.0); m * m];
    for b in 0..m {
        let mut e = vec![T::con(0.0); m];
        e[b] = T::con(1.0);
        let col = solve_linear(&w, &e, m, "normalization pairing")?;
        for r in 0..m {
            k_inv[r * m + b] = col[r].clone();
        }
    }
    let mut b0: Vec<Vec<T>> = vec![vec![T::con(0.0); n]; m];
    for b in 0..m {
        for i in 0..n {
            let mut acc = T::con(0.0);
            for r in 0..m {
                acc = acc + mm[r * n + i].clone() * k_inv[r * m + b].clone();
            }
            b0[b][i] = acc;
        }
    }
    // C = B0^T A B0 is skew; the tangential correction S = C/2 makes the
    // complement Lagrangian while preserving the pairing.
    let mut s_corr = vec![T::con(0.0); m * m];
    for r in 0..m {
        for c in 0..m {
            let mut acc = T::con(0.0);
            for i in 0..n {
                for j in 0..n {
                    acc = acc + b0[r][i].clone() * a[i * n + j].clone() * b0[c][j].clone();
                }
            }
            s_corr[r * m + c] = acc.scale(0.5);
        }
    }
    let mut out = Vec::with_capacity(m);
    for b in 0..m {
        let mut col = b0[b].clone();
        for (r, t) in tangents.iter().enumerate() {
            for i in 0..n {
                col[i] = col[i].clone() + t[i].clone() * s_corr[r * m + b].clone();
            }
        }
        out.push(col);
    }
    Ok(out)
}

struct FiberLinearMap {
    tube: TubularModel,
    omega_a: KFormField,
    omega_b: KFormField,
}

impl Debug for FiberLinearMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FiberLinearMap")
    }
}

impl FiberLinearMap {
    fn eval_generic<T: NumDispatch>(&self, p: &[T]) -> Result<Vec<T>> {
        let sub = &self.tube.submanifold;
        let n = sub.ambient_dim;
        let m = sub.param_dim;
        let c = self.tube.coords_num(p)?;
        let tangents = tangent_frame_num(sub, &c.u)?;
        let a_mat = crate::forms::skew_matrix(n, &self.omega_a.eval_num(&c.q)?);
        let b_mat = crate::forms::skew_matrix(n, &self.omega_b.eval_num(&c.q)?);
        let comp_a = lagrangian_complement(&a_mat, &tangents, n, m)?;
        let comp_b = lagrangian_complement(&b_mat, &tangents, n, m)?;
        // Decompose the offset in the (tangents | a-complement) frame and
        // rebuild it with the b-complement; the tangent block is fixed.
        let mut fa = vec![T::con(0.0); n * n];
        for i in 0..n {
            for col in 0..m {
                fa[i * n + col] = tangents[col][i].clone();
                fa[i * n + m + col] = comp_a[col][i].clone();
            }
        }
        let coeffs = solve_linear(&fa, &c.v, n, "normalization frame")?;
        let mut out = c.q;
        for i in 0..n {
            let mut acc = out[i].clone();
            for col in 0..m {
                acc = acc + tangents[col][i].clone() * coeffs[col].clone();
                acc = acc + comp_b[col][i].clone() * coeffs[m + col].clone();
            }
            out[i] = acc;
        }
        Ok(out)
    }
}

impl CustomMap for FiberLinearMap {
    fn n_in(&self) -> usize {
        self.tube.submanifold.ambient_dim
    }
    fn n_out(&self) -> usize {
        self.tube.submanifold.ambient_dim
    }
    fn eval_f64(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.eval_generic(p)
    }
    fn eval_dual(&self, p: &[crate::num::Dual]) -> Result<Vec<crate::num::Dual>> {
        self.eval_generic(p)
    }
    fn eval_dual2(&self, p: &[crate::num::Dual2]) -> Result<Vec<crate::num::Dual2>> {
        self.eval_generic(p)
    }
}

/// The normalization diffeomorphism with its verified postcondition.
#[derive(Debug, Clone)]
pub struct Normalization {
    pub psi: SmoothMap,
    /// Max coefficient difference of `psi^* omega_b` and `omega_a` on
    /// `T_qM` over the Q grid.
    pub residual_on_q: f64,
}

/// A tube diffeomorphism `psi`, identity on `Q`, with `psi^* omega_b`
/// equal to `omega_a` on `T_qM` for every `q` in `Q`: pointwise linear
/// maps fixing `T_qQ` and exchanging dual-normalized Lagrangian
/// complements, extended fiber-constantly in tube coordinates.
pub fn lagrangian_linear_normalization(
    omega_a: &KFormField,
    omega_b: &KFormField,
    tube: &TubularModel,
    tol: &CotangentTolerances,
) -> Result<Normalization> {
    let sub = &tube.submanifold;
    let n = sub.ambient_dim;
    if omega_a.n() != n || omega_b.n() != n {
        return Err(GeomError::DimensionMismatch {
            context: "normalization forms",
            expected: n,
            got: omega_a.n(),
        });
    }
    let grid = sub.chart_grid(6);
    for u in &grid {
        let q = sub.embed(u)?;
        let tangents = sub.tangent_frame(u)?;
        for w in [omega_a.value(&q)?, omega_b.value(&q)?] {
            let nd = nondegeneracy(&w, 1e-10)?;
            if !nd.nondegenerate {
                return Err(GeomError::Degenerate {
                    context: "normalization form",
                    point: q.clone(),
                    margin: nd.min_singular,
                    threshold: 1e-10,
                });
            }
            for i in 0..sub.param_dim {
                for j in (i + 1)..sub.param_dim {
                    let pair = w.apply(&[tangents[i].clone(), tangents[j].clone()])?;
                    let scale = norm(&tangents[i]) * norm(&tangents[j]);
                    if pair.abs() > tol.lagrangian * scale.max(1e-300) {
                        return Err(GeomError::Hypothesis {
                            name: "q-lagrangian".to_string(),
                            detail: format!("omega(t{i}, t{j}) = {pair:.3e} at {q:?}"),
                        });
                    }
                }
            }
        }
    }
    let psi = SmoothMap::custom(Arc::new(FiberLinearMap {
        tube: tube.clone(),
        omega_a: omega_a.clone(),
        omega_b: omega_b.clone(),
    }));
    let mut residual = 0.0f64;
    for u in &grid {
        let q = sub.embed(u)?;
        let jac = psi.jacobian(&q)?;
        let wb = omega_b.value(&psi.apply(&q)?)?;
        let pulled = pullback_value(&wb, &jac, n);
        residual = residual.max(omega_a.value(&q)?.sub(&pulled).max_abs());
    }
    if residual > tol.normalization {
        return Err(GeomError::Hypothesis {
            name: "normalization-postcondition".to_string(),
            detail: format!(
                "coefficient difference {residual:.3e} > {:.3e} on T_qM",
                tol.normalization
            ),
        });
    }
    Ok(Normalization {
        psi,
        residual_on_q: residual,
    })
}

// ---------------------------------------------------------------------------
// Weinstein pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct WeinsteinTolerances {
    pub cot: CotangentTolerances,
    /// Conformal factor magnitude along Q.
    pub factor_on_q: f64,
    /// Conformal residual of the composed pullback at the tube seeds.
    pub conclusion: f64,
}

impl Default for WeinsteinTolerances {
    fn default() -> Self {
        WeinsteinTolerances {
            cot: CotangentTolerances::default(),
            factor_on_q: 1e-6,
            conclusion: 1e-4,
        }
    }
}

pub struct WeinsteinInput {
    pub omega: KFormField,
    pub theta: KFormField,
    pub metric: MetricField,
    pub tube: TubularModel,
    pub patches: Vec<crate::moser::DwPatch>,
    pub steps: usize,
    pub dw_tol: DwTolerances,
    pub tol: WeinsteinTolerances,
}

#[derive(Debug)]
pub struct WeinsteinResult {
    pub identification: LagrangianIdentification,
    pub hr: HallerRybickiForm,
    pub transported: TransportedForm,
    pub normalization: Normalization,
    pub dw: DwResult,
    pub report: VerificationReport,
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..n {
                acc += a[i * n + l] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// The Weinstein-type pipeline: identify the normal bundle with `T*Q`,
/// transport `omega_theta`, normalize on `T_qM`, run the
/// Darboux-Weinstein flow, and verify that the composed map pulls
/// `omega_theta` back to a conformal multiple of `omega` whose factor
/// vanishes along `Q`. The report records separately whether strict
/// equality (not just conformal equivalence) holds.
pub fn weinstein_lcs(input: &WeinsteinInput) -> Result<WeinsteinResult> {
    let sub = &input.tube.submanifold;
    let n = sub.ambient_dim;
    let m = sub.param_dim;

    let all_samples: Vec<Vec<f64>> = input
        .patches
        .iter()
        .flat_map(|p| p.patch.samples.iter().cloned())
        .collect();
    let s = stage(
        "lcs-check",
        LcsStructure::new(input.omega.clone(), input.theta.clone()),
    )?;
    let lcs_report = stage(
        "lcs-check",
        check_lcs(&s, &all_samples, &LcsTolerances::default()),
    )?;
    if !lcs_report.pass {
        return Err(GeomError::Stage {
            stage: "lcs-check",
            source: Box::new(GeomError::Hypothesis {
                name: "ambient-lcs".to_string(),
                detail: "the ambient pair (omega, theta) is not LCS on the samples".to_string(),
            }),
        });
    }

    let chart_samples = sub.chart_grid(6);
    let identification = stage(
        "identify",
        identify_normal_cotangent(
            &input.omega,
            &input.metric,
            &input.tube,
            &chart_samples,
            &input.tol.cot,
        ),
    )?;

    let model = stage(
        "hr-form",
        CotangentModel::new(
            m,
            sub.box_min.clone(),
            sub.box_max.clone(),
            sub.periodic.clone(),
        ),
    )?;
    let theta_base = stage(
        "hr-form",
        KFormField::pullback(&sub.embedding_map(), &input.theta),
    )?;
    let hr = stage("hr-form", hr_form(&model, &theta_base, &input.tol.cot))?;

    let transported = stage("transport", transport_form(&hr, &identification))?;

    let normalization = stage(
        "normalize",
        lagrangian_linear_normalization(
            &input.omega,
            &transported.form,
            &input.tube,
            &input.tol.cot,
        ),
    )?;

    let omega1 = stage(
        "darboux",
        KFormField::pullback(&normalization.psi, &transported.form),
    )?;
    let theta1 = stage(
        "darboux",
        KFormField::pullback(&normalization.psi, &transported.lee),
    )?;
    let dw = stage(
        "darboux",
        darboux_weinstein(&DwInput {
            omega0: input.omega.clone(),
            omega1,
            theta0: input.theta.clone(),
            theta1,
            tube: input.tube.clone(),
            patches: input.patches.clone(),
            steps: input.steps,
            tol: input.dw_tol,
        }),
    )?;

    // Conclusion through the explicit composite chart o psi o phi, with
    // the Jacobian assembled from the stored flow records.
    let mut conformal_res = Vec::new();
    let mut strict_res = Vec::new();
    let mut factor_q = Vec::new();
    for (dw_patch, result) in input.patches.iter().zip(&dw.patches) {
        for (rec, &g) in result.flow.records.iter().zip(&result.factor_samples) {
            let x0 = &rec.image;
            let jac_psi = normalization.psi.jacobian(x0)?;
            let x1 = normalization.psi.apply(x0)?;
            let jac_chart = transported.chart.jacobian(&x1)?;
            let x2 = transported.chart.apply(&x1)?;
            let jac = matmul(&jac_chart, &matmul(&jac_psi, &rec.jacobian, n), n);
            let pulled = pullback_value(&hr.omega_theta.value(&x2)?, &jac, n);
            let w0 = input.omega.value(&rec.seed)?;
            strict_res.push(w0.sub(&pulled).max_abs());
            conformal_res.push(w0.sub(&pulled.scale(g.exp())).max_abs());
        }
        for q in &dw_patch.q_samples {
            let g = result.f0.f.value(q)?.coeffs[0] - result.f1.f.value(q)?.coeffs[0];
            factor_q.push(g.abs());
        }
    }

    let mut report = VerificationReport::new("", "weinstein", 0, all_samples.len());
    for c in &dw.report.checks {
        report.push(c.clone());
    }
    for (k, v) in &dw.report.metrics {
        report.metric(k, *v);
    }
    report.push(CheckResult::single(
        "normalization-on-q",
        normalization.residual_on_q,
        input.tol.cot.normalization,
    ));
    report.push(CheckResult::from_residuals(
        "weinstein-conformal-conclusion",
        &conformal_res,
        input.tol.conclusion,
    ));
    report.push(CheckResult::from_residuals(
        "weinstein-factor-on-q",
        &factor_q,
        input.tol.factor_on_q,
    ));
    let strict_max = strict_res.iter().copied().fold(0.0, f64::max);
    report.metric("strict_equality_residual", strict_max);
    let strict = strict_max <= input.tol.conclusion;
    report.push(
        CheckResult::boolean("weinstein-equality-mode", true).with_detail(if strict {
            format!("strict equality holds (residual {strict_max:.3e})")
        } else {
            format!("conformal equivalence only (strict residual {strict_max:.3e})")
        }),
    );
    Ok(WeinsteinResult {
        identification,
        hr,
        transported,
        normalization,
        dw,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::lcs::ball_patch;
    use crate::moser::DwPatch;
    use crate::multiindex::multi_indices;
    use crate::tube::SubmanifoldModel;
    use approx::assert_relative_eq;

    fn model_k(k: usize) -> CotangentModel {
        CotangentModel::new(k, vec![-1.0; k], vec![1.0; k], vec![false; k]).unwrap()
    }

    #[test]
    fn liouville_values() {
        let model = model_k(1);
        let eta = liouville(&model);
        let v = eta.value(&[0.4, 3.0]).unwrap();
        assert_relative_eq!(v.coeffs[0], 3.0);
        assert_relative_eq!(v.coeffs[1], 0.0);
        let z = eta.value(&[0.4, 0.0]).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn zero_section_pullback_of_liouville_vanishes() {
        let model = model_k(2);
        let eta = liouville(&model);
        let pulled = KFormField::pullback(&model.zero_section(), &eta).unwrap();
        let v = pulled.value(&[0.3, -0.7]).unwrap();
        assert!(v.max_abs() < 1e-14);
    }

    #[test]
    fn hr_constant_theta_expansion() {
        // k = 2, theta = a dx1: omega_theta = dp1^dx1 + dp2^dx2
        // - a p2 dx1^dx2, i.e. coefficients -a p2 on e12, -1 on e13 and e24.
        let model = model_k(2);
        let a = 0.7;
        let theta =
            KFormField::from_exprs(2, 1, &[(vec![1], parse("0.7", 2).unwrap())]).unwrap();
        let hr = hr_form(&model, &theta, &CotangentTolerances::default()).unwrap();
        let p2 = 1.1;
        let v = hr.omega_theta.value(&[0.3, -0.2, 0.5, p2]).unwrap();
        let idx = multi_indices(4, 2);
        for (r, pair) in idx.iter().enumerate() {
            let expected = match (pair[0], pair[1]) {
                (0, 1) => -a * p2,
                (0, 2) => -1.0,
                (1, 3) => -1.0,
                _ => 0.0,
            };
            assert_relative_eq!(v.coeffs[r], expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn hr_verifies_as_lcs_with_lagrangian_section() {
        let model = model_k(2);
        let tol = CotangentTolerances::default();
        for theta in [
            KFormField::zero(2, 1),
            KFormField::from_exprs(2, 1, &[(vec![1], parse("0.7", 2).unwrap())]).unwrap(),
        ] {
            let hr = hr_form(&model, &theta, &tol).unwrap();
            let samples = model.sample_points(40, 0.8, 7);
            let report = hr.verify(&samples, &tol).unwrap();
            assert!(report.pass, "{}", report.to_json());
        }
    }

    #[test]
    fn hr_rejects_nonclosed_theta() {
        let model = model_k(2);
        let theta =
            KFormField::from_exprs(2, 1, &[(vec![1], parse("x2", 2).unwrap())]).unwrap();
        assert!(matches!(
            hr_form(&model, &theta, &CotangentTolerances::default()),
            Err(GeomError::NotClosed { .. })
        ));
    }

    #[test]
    fn gcs_direction_for_exact_theta() {
        let model = model_k(2);
        let f = KFormField::from_exprs(2, 0, &[(vec![], parse("0.3*sin(x1)", 2).unwrap())])
            .unwrap();
        let theta = f.d();
        let hr = hr_form(&model, &theta, &CotangentTolerances::default()).unwrap();
        let samples = model.sample_points(30, 0.8, 11);
        let res = gcs_residual(&hr, &f, &samples).unwrap();
        assert!(res < 1e-7, "closedness residual {res:.3e}");
    }

    #[test]
    fn perturbed_form_still_vanishes_on_section() {
        // Adding dp1^dp2 does not change the zero-section contraction.
        let model = model_k(2);
        let hr = hr_form(&model, &KFormField::zero(2, 1), &CotangentTolerances::default())
            .unwrap();
        let mut coeffs = vec![0.0; 6];
        coeffs[multi_indices(4, 2).iter().position(|i| i == &[2, 3]).unwrap()] = 1.0;
        let perturbed = hr
            .omega_theta
            .add(&KFormField::constant(4, 2, coeffs).unwrap())
            .unwrap();
        let check =
            zero_section_lagrangian(&model, &perturbed, &model.base_grid(5), 1e-10).unwrap();
        assert!(check.pass);
    }

    fn x_axis_tube() -> TubularModel {
        let sub = Arc::new(
            SubmanifoldModel::new(
                2,
                vec![parse("x1", 1).unwrap(), parse("0", 1).unwrap()],
                vec![-1.0],
                vec![1.0],
                vec![false],
                Some(vec![vec![parse("0", 1).unwrap(), parse("1", 1).unwrap()]]),
            )
            .unwrap(),
        );
        TubularModel::new(sub, 0.5).unwrap()
    }

    #[test]
    fn identification_hand_oracle() {
        // M = R^2, Q = x-axis, omega = dx^dy, g euclidean: v = (0, 1)
        // solves to w = (1, 0) and w* = dx, i.e. coefficient 1.
        let tube = x_axis_tube();
        let omega = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let metric = MetricField::euclidean(2);
        let samples: Vec<Vec<f64>> = vec![vec![0.0], vec![0.5]];
        let ident = identify_normal_cotangent(
            &omega,
            &metric,
            &tube,
            &samples,
            &CotangentTolerances::default(),
        )
        .unwrap();
        let wstar = ident.fiber_covector(&[0.2], &[0.0, 1.0]).unwrap();
        assert_relative_eq!(wstar[0], 1.0, epsilon = 1e-12);
        for s in &ident.samples {
            assert_relative_eq!(s.fiber_matrix[0], 1.0, epsilon = 1e-12);
            assert!(s.margin > 0.5);
        }
    }

    #[test]
    fn identification_is_linear_and_scales() {
        let tube = x_axis_tube();
        let omega = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let metric = MetricField::euclidean(2);
        let ident = identify_normal_cotangent(
            &omega,
            &metric,
            &tube,
            &[vec![0.1]],
            &CotangentTolerances::default(),
        )
        .unwrap();
        let u = [0.1];
        let w1 = ident.fiber_covector(&u, &[0.0, 0.4]).unwrap();
        let w2 = ident.fiber_covector(&u, &[0.0, -1.3]).unwrap();
        let ws = ident.fiber_covector(&u, &[0.0, 0.4 - 1.3]).unwrap();
        assert_relative_eq!(w1[0] + w2[0], ws[0], epsilon = 1e-12);
        let wz = ident.fiber_covector(&u, &[0.0, 0.0]).unwrap();
        assert_eq!(wz[0], 0.0);
        let wd = ident.fiber_covector(&u, &[0.0, 0.8]).unwrap();
        assert_relative_eq!(wd[0], 2.0 * w1[0], epsilon = 1e-12);
    }

    #[test]
    fn identification_rejects_nonlagrangian() {
        // Q = x-axis in R^2 with omega = dx^dy is Lagrangian, but a
        // diagonal line in R^2 with a form pairing its own tangent is not
        // constructible in n = 2; use n = 4 with Q = (x1, x2) plane and a
        // form that pairs the two tangents.
        let sub = Arc::new(
            SubmanifoldModel::new(
                4,
                vec![
                    parse("x1", 2).unwrap(),
                    parse("x2", 2).unwrap(),
                    parse("0", 2).unwrap(),
                    parse("0", 2).unwrap(),
                ],
                vec![-1.0, -1.0],
                vec![1.0, 1.0],
                vec![false, false],
                None,
            )
            .unwrap(),
        );
        let tube = TubularModel::new(sub, 0.5).unwrap();
        // omega = dx1^dx2 + dx3^dx4 pairs the plane's tangents.
        let mut coeffs = vec![0.0; 6];
        let idx = multi_indices(4, 2);
        coeffs[idx.iter().position(|i| i == &[0, 1]).unwrap()] = 1.0;
        coeffs[idx.iter().position(|i| i == &[2, 3]).unwrap()] = 1.0;
        let omega = KFormField::constant(4, 2, coeffs).unwrap();
        let err = identify_normal_cotangent(
            &omega,
            &MetricField::euclidean(4),
            &tube,
            &[vec![0.0, 0.0]],
            &CotangentTolerances::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GeomError::Hypothesis { name, .. } if name == "q-lagrangian"));
    }

    #[test]
    fn chart_sends_q_to_zero_section() {
        let tube = x_axis_tube();
        let omega = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let ident = identify_normal_cotangent(
            &omega,
            &MetricField::euclidean(2),
            &tube,
            &[vec![0.0]],
            &CotangentTolerances::default(),
        )
        .unwrap();
        let chart = ident.chart();
        let img = chart.apply(&[0.3, 0.0]).unwrap();
        assert_relative_eq!(img[0], 0.3, epsilon = 1e-12);
        assert!(img[1].abs() < 1e-12);
        // Off Q the covector coefficient is the fiber offset here.
        let img = chart.apply(&[0.3, 0.2]).unwrap();
        assert_relative_eq!(img[1], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn transport_x_axis_oracle() {
        // The chart is (x, y) -> (x1 = x, p1 = y); the pullback of
        // omega_theta = dp1^dx1 is dy^dx = -dx^dy, nondegenerate and
        // closed, with Q Lagrangian for it.
        let tube = x_axis_tube();
        let omega = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let ident = identify_normal_cotangent(
            &omega,
            &MetricField::euclidean(2),
            &tube,
            &[vec![0.0], vec![0.5]],
            &CotangentTolerances::default(),
        )
        .unwrap();
        let model = model_k(1);
        let hr = hr_form(&model, &KFormField::zero(1, 1), &CotangentTolerances::default())
            .unwrap();
        let transported = transport_form(&hr, &ident).unwrap();
        let d = transported.form.d();
        for p in [[0.2, 0.1], [-0.4, -0.3], [0.7, 0.25]] {
            let v = transported.form.value(&p).unwrap();
            assert_relative_eq!(v.coeffs[0], -1.0, epsilon = 1e-9);
            assert!(d.value(&p).unwrap().max_abs() < 1e-8);
            assert!(transported.lee.value(&p).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_identity_when_forms_agree() {
        let tube = x_axis_tube();
        let omega = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let norm = lagrangian_linear_normalization(
            &omega,
            &omega,
            &tube,
            &CotangentTolerances::default(),
        )
        .unwrap();
        for p in [[0.2, 0.3], [-0.5, -0.1]] {
            let img = norm.psi.apply(&p).unwrap();
            assert_relative_eq!(img[0], p[0], epsilon = 1e-12);
            assert_relative_eq!(img[1], p[1], epsilon = 1e-12);
        }
        assert!(norm.residual_on_q < 1e-12);
    }

    #[test]
    fn normalization_recovers_sign_flip() {
        // omega_b = -dx^dy needs the fiber reflection (x, y) -> (x, -y).
        let tube = x_axis_tube();
        let omega_a = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let omega_b = KFormField::constant(2, 2, vec![-1.0]).unwrap();
        let norm = lagrangian_linear_normalization(
            &omega_a,
            &omega_b,
            &tube,
            &CotangentTolerances::default(),
        )
        .unwrap();
        let img = norm.psi.apply(&[0.4, 0.3]).unwrap();
        assert_relative_eq!(img[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(img[1], -0.3, epsilon = 1e-12);
        assert!(norm.residual_on_q < 1e-10);
    }

    fn strip_patch(samples: Vec<Vec<f64>>, q_samples: Vec<Vec<f64>>) -> DwPatch {
        DwPatch {
            patch: ball_patch(vec![0.0, 0.0], 1.2, samples).unwrap(),
            anchor: vec![0.0, 0.0],
            q_samples,
        }
    }

    fn tube_samples() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let samples: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let x = -0.8 + 0.15 * i as f64;
                vec![x, 0.25 * ((i as f64 * 0.9).sin())]
            })
            .collect();
        let q_samples: Vec<Vec<f64>> = (0..6).map(|i| vec![-0.75 + 0.3 * i as f64, 0.0]).collect();
        (samples, q_samples)
    }

    #[test]
    fn weinstein_symplectic_strip_is_strict() {
        // omega = dx^dy, theta = 0: tau vanishes, the flow is trivial and
        // strict equality holds.
        let tube = x_axis_tube();
        let (samples, q_samples) = tube_samples();
        let input = WeinsteinInput {
            omega: KFormField::constant(2, 2, vec![1.0]).unwrap(),
            theta: KFormField::zero(2, 1),
            metric: MetricField::euclidean(2),
            tube,
            patches: vec![strip_patch(samples, q_samples)],
            steps: 8,
            dw_tol: DwTolerances::default(),
            tol: WeinsteinTolerances::default(),
        };
        let result = weinstein_lcs(&input).unwrap();
        assert!(result.report.pass, "{}", result.report.to_json());
        assert!(result.report.metrics["strict_equality_residual"] < 1e-9);
        let mode = result.report.check("weinstein-equality-mode").unwrap();
        assert!(mode.detail.as_deref().unwrap().starts_with("strict"));
    }

    #[test]
    fn weinstein_gcs_strip_is_conformal_only() {
        // omega = e^{x2} dx^dy with theta = dx2: the recovered factor is
        // x2, zero along Q, so the conclusion is conformal but not strict.
        let tube = x_axis_tube();
        let (samples, q_samples) = tube_samples();
        let omega =
            KFormField::from_exprs(2, 2, &[(vec![1, 2], parse("exp(x2)", 2).unwrap())]).unwrap();
        let theta =
            KFormField::from_exprs(2, 1, &[(vec![2], parse("1", 2).unwrap())]).unwrap();
        let input = WeinsteinInput {
            omega,
            theta,
            metric: MetricField::euclidean(2),
            tube,
            patches: vec![strip_patch(samples, q_samples)],
            steps: 8,
            dw_tol: DwTolerances::default(),
            tol: WeinsteinTolerances::default(),
        };
        let result = weinstein_lcs(&input).unwrap();
        assert!(result.report.pass, "{}", result.report.to_json());
        assert!(result.report.metrics["strict_equality_residual"] > 1e-2);
        let mode = result.report.check("weinstein-equality-mode").unwrap();
        assert!(mode.detail.as_deref().unwrap().starts_with("conformal"));
        let fq = result.report.check("weinstein-factor-on-q").unwrap();
        assert!(fq.pass);
    }

    #[test]
    fn weinstein_stage_errors_are_named() {
        // A non-Lagrangian Q is rejected by the identify stage.
        let sub = Arc::new(
            SubmanifoldModel::new(
                4,
                vec![
                    parse("x1", 2).unwrap(),
                    parse("x2", 2).unwrap(),
                    parse("0", 2).unwrap(),
                    parse("0", 2).unwrap(),
                ],
                vec![-1.0, -1.0],
                vec![1.0, 1.0],
                vec![false, false],
                None,
            )
            .unwrap(),
        );
        let tube = TubularModel::new(sub, 0.4).unwrap();
        let mut coeffs = vec![0.0; 6];
        let idx = multi_indices(4, 2);
        coeffs[idx.iter().position(|i| i == &[0, 1]).unwrap()] = 1.0;
        coeffs[idx.iter().position(|i| i == &[2, 3]).unwrap()] = 1.0;
        let omega = KFormField::constant(4, 2, coeffs).unwrap();
        let samples: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![0.1 * i as f64 - 0.4, 0.05 * i as f64 - 0.2, 0.0, 0.0])
            .collect();
        let input = WeinsteinInput {
            omega,
            theta: KFormField::zero(4, 1),
            metric: MetricField::euclidean(4),
            tube,
            patches: vec![DwPatch {
                patch: ball_patch(vec![0.0; 4], 2.0, samples).unwrap(),
                anchor: vec![0.0; 4],
                q_samples: vec![vec![0.0; 4]],
            }],
            steps: 4,
            dw_tol: DwTolerances::default(),
            tol: WeinsteinTolerances::default(),
        };
        let err = weinstein_lcs(&input).unwrap_err();
        assert!(matches!(err, GeomError::Stage { stage: "identify", .. }));
    }
}

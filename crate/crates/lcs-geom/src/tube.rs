//! Submanifold models, flat-metric tubular neighborhoods and the
//! retraction family collapsing a tube onto its core.
//!
//! The ambient metric is flat, so `exp(q, v) = q + v` and the retraction
//! `phi_t(q + v) = q + t v` is exact; its time velocity is the normal
//! component `v` of the tube coordinates, defined for all `t` in [0, 1].

use std::sync::Arc;

use crate::error::{GeomError, Result};
use crate::expr::Expr;
use crate::num::{jets, GenericFn, Num};

/// An embedded submanifold `Q` of an `n`-dimensional coordinate patch,
/// given by a parametrization over a bounded chart box (the compactness
/// proxy), with optional explicit normal frame.
#[derive(Debug, Clone)]
pub struct SubmanifoldModel {
    pub ambient_dim: usize,
    pub param_dim: usize,
    /// `ambient_dim` expressions in the chart variables `x1..x<param_dim>`.
    parametrization: Vec<Expr>,
    pub box_min: Vec<f64>,
    pub box_max: Vec<f64>,
    pub periodic: Vec<bool>,
    /// Optional normal frame: `ambient_dim - param_dim` vectors of
    /// expressions in the chart variables. Orthonormalized at evaluation.
    normal_frame: Option<Vec<Vec<Expr>>>,
}

struct EmbedFn<'a>(&'a SubmanifoldModel);

impl GenericFn for EmbedFn<'_> {
    fn call_f64(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.0.embed_num(q)
    }
    fn call_dual(&self, q: &[crate::num::Dual]) -> Result<Vec<crate::num::Dual>> {
        self.0.embed_num(q)
    }
    fn call_dual2(&self, q: &[crate::num::Dual2]) -> Result<Vec<crate::num::Dual2>> {
        self.0.embed_num(q)
    }
}

impl SubmanifoldModel {
    pub fn new(
        ambient_dim: usize,
        parametrization: Vec<Expr>,
        box_min: Vec<f64>,
        box_max: Vec<f64>,
        periodic: Vec<bool>,
        normal_frame: Option<Vec<Vec<Expr>>>,
    ) -> Result<Self> {
        let param_dim = box_min.len();
        if parametrization.len() != ambient_dim {
            return Err(GeomError::DimensionMismatch {
                context: "submanifold parametrization",
                expected: ambient_dim,
                got: parametrization.len(),
            });
        }
        if box_max.len() != param_dim || periodic.len() != param_dim {
            return Err(GeomError::InvalidInput(
                "chart box min/max/periodic lengths disagree".into(),
            ));
        }
        if let Some(frame) = &normal_frame {
            if frame.len() != ambient_dim - param_dim {
                return Err(GeomError::DimensionMismatch {
                    context: "normal frame count",
                    expected: ambient_dim - param_dim,
                    got: frame.len(),
                });
            }
        }
        Ok(SubmanifoldModel {
            ambient_dim,
            param_dim,
            parametrization,
            box_min,
            box_max,
            periodic,
            normal_frame,
        })
    }

    /// The embedding of a chart point into the ambient patch.
    pub fn embed(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.embed_num(u)
    }

    pub(crate) fn embed_num<T: Num>(&self, u: &[T]) -> Result<Vec<T>> {
        self.parametrization
            .iter()
            .map(|e| e.eval_num(u).map_err(GeomError::from))
            .collect()
    }

    /// The embedding as a [`SmoothMap`], e.g. for pulling ambient forms
    /// back to the chart.
    pub fn embedding_map(&self) -> crate::forms::SmoothMap {
        crate::forms::SmoothMap::from_exprs(self.param_dim, self.parametrization.clone())
    }

    /// Jets of the embedding at a chart point, for callers that need the
    /// tangent frame in generic scalar arithmetic.
    pub(crate) fn embed_jets(&self, u: &[f64], order: usize) -> Result<Vec<crate::num::Jet>> {
        jets(&EmbedFn(self), u, order)
    }

    /// Coordinate tangent frame `d(embed)/du_a` at a chart point
    /// (not orthonormalized), as `param_dim` ambient vectors.
    pub fn tangent_frame(&self, u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let js = jets(&EmbedFn(self), u, 1)?;
        Ok((0..self.param_dim)
            .map(|a| js.iter().map(|j| j.g[a]).collect())
            .collect())
    }

    /// Orthonormal normal frame at a chart point: the declared frame
    /// expressions projected off the tangent space and Gram-Schmidt
    /// orthonormalized; without declared frame, an SVD null-space basis.
    pub fn normal_frame(&self, u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.ambient_dim;
        let codim = n - self.param_dim;
        let tangents = self.tangent_frame(u)?;
        let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(self.param_dim + codim);
        for t in &tangents {
            push_orthonormal(&mut ortho, t.clone())?;
        }
        let raw: Vec<Vec<f64>> = match &self.normal_frame {
            Some(frame) => frame
                .iter()
                .map(|exprs| {
                    exprs
                        .iter()
                        .map(|e| e.eval(u).map_err(GeomError::from))
                        .collect()
                })
                .collect::<Result<_>>()?,
            None => {
                // Complete the tangent basis with coordinate directions,
                // keeping the first `codim` that are genuinely new. Greedy
                // and deterministic; the frame is pointwise orthonormal
                // but not guaranteed continuous in the chart, so curved
                // submanifolds should declare a frame.
                let mut raw = Vec::with_capacity(codim);
                let mut basis = ortho.clone();
                for i in 0..n {
                    if raw.len() == codim {
                        break;
                    }
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    if push_orthonormal(&mut basis, e).is_ok() {
                        raw.push(basis.last().expect("just pushed").clone());
                    }
                }
                raw
            }
        };
        let tangent_count = ortho.len();
        for v in raw {
            push_orthonormal(&mut ortho, v)?;
        }
        Ok(ortho.split_off(tangent_count))
    }

    /// Checks that tangent and normal frames are mutually orthogonal and
    /// each linearly independent at the given chart points.
    pub fn validate_frames(&self, chart_points: &[Vec<f64>]) -> Result<()> {
        for u in chart_points {
            let t = self.tangent_frame(u)?;
            let nf = self.normal_frame(u)?;
            for (i, a) in t.iter().enumerate() {
                let norm = dot(a, a).sqrt();
                if norm < 1e-10 {
                    return Err(GeomError::InvalidInput(format!(
                        "tangent frame vector {i} degenerate at chart point {u:?}"
                    )));
                }
                for b in &nf {
                    if dot(a, b).abs() / norm > 1e-8 {
                        return Err(GeomError::InvalidInput(format!(
                            "tangent and normal frames not orthogonal at {u:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// A uniform grid of chart points (interior nodes of the box).
    pub fn chart_grid(&self, per_dim: usize) -> Vec<Vec<f64>> {
        if self.param_dim == 0 {
            return vec![Vec::new()];
        }
        let mut pts = vec![Vec::new()];
        for a in 0..self.param_dim {
            let lo = self.box_min[a];
            let hi = self.box_max[a];
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
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn push_orthonormal(basis: &mut Vec<Vec<f64>>, mut v: Vec<f64>) -> Result<()> {
    for _ in 0..2 {
        for b in basis.iter() {
            let c = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
    }
    let norm = dot(&v, &v).sqrt();
    if norm < 1e-10 {
        return Err(GeomError::InvalidInput(
            "frame vector linearly dependent on the preceding ones".into(),
        ));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    basis.push(v);
    Ok(())
}

/// Tube coordinates of an ambient point: chart parameters `u`, foot point
/// `q = embed(u)` and normal offset `v = p - q`.
#[derive(Debug, Clone)]
pub struct TubeCoords<T> {
    pub u: Vec<T>,
    pub q: Vec<T>,
    pub v: Vec<T>,
}

/// A flat-metric tubular neighborhood of radius `epsilon` around `Q`.
#[derive(Debug, Clone)]
pub struct TubularModel {
    pub submanifold: Arc<SubmanifoldModel>,
    pub epsilon: f64,
}

impl TubularModel {
    pub fn new(submanifold: Arc<SubmanifoldModel>, epsilon: f64) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(GeomError::InvalidInput("tube epsilon must be > 0".into()));
        }
        Ok(TubularModel {
            submanifold,
            epsilon,
        })
    }

    /// `exp(q, v) = q + v` for a chart point and normal coefficients in
    /// the orthonormal normal frame.
    pub fn point_from(&self, u: &[f64], normal_coeffs: &[f64]) -> Result<Vec<f64>> {
        let q = self.submanifold.embed(u)?;
        let frame = self.submanifold.normal_frame(u)?;
        let mut p = q;
        for (c, nv) in normal_coeffs.iter().zip(&frame) {
            for (x, y) in p.iter_mut().zip(nv) {
                *x += c * y;
            }
        }
        Ok(p)
    }

    /// Nearest-point tube coordinates of `p` (f64 path).
    pub fn coords(&self, p: &[f64]) -> Result<TubeCoords<f64>> {
        self.coords_num(p)
    }

    /// Tube coordinates in generic scalar arithmetic: a plain Gauss-Newton
    /// projection solve, then fixed-point refinement in `T` so that the
    /// derivative blocks converge as well (exact in one sweep for flat
    /// submanifolds, geometrically for curved ones).
    pub(crate) fn coords_num<T: Num>(&self, p: &[T]) -> Result<TubeCoords<T>> {
        let sub = &self.submanifold;
        let n = sub.ambient_dim;
        if p.len() != n {
            return Err(GeomError::DimensionMismatch {
                context: "tube coordinates",
                expected: n,
                got: p.len(),
            });
        }
        let m = sub.param_dim;
        let base_p: Vec<f64> = p.iter().map(|x| x.val()).collect();
        if m == 0 {
            let q = sub.embed_num(p)?; // constants
            let v: Vec<T> = p.iter().zip(&q).map(|(a, b)| a.clone() - b.clone()).collect();
            self.check_radius(&base_p, &v)?;
            return Ok(TubeCoords { u: Vec::new(), q, v });
        }

        // Primal solve: grid initialization plus Gauss-Newton.
        let grid_per_dim = if m == 1 { 12 } else { 6 };
        let mut best_u = Vec::new();
        let mut best_d = f64::INFINITY;
        for u in sub.chart_grid(grid_per_dim) {
            let q = sub.embed(&u)?;
            let d: f64 = q.iter().zip(&base_p).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best_u = u;
            }
        }
        let mut u = best_u;
        let mut grad_norm = f64::INFINITY;
        for _ in 0..200 {
            let q = sub.embed(&u)?;
            let tangents = sub.tangent_frame(&u)?;
            let r: Vec<f64> = base_p.iter().zip(&q).map(|(a, b)| a - b).collect();
            let g: Vec<f64> = tangents.iter().map(|t| dot(t, &r)).collect();
            grad_norm = g.iter().map(|x| x.abs()).fold(0.0, f64::max);
            if grad_norm < 1e-14 {
                break;
            }
            // Gauss-Newton step on |p - embed(u)|^2 / 2.
            let mut a = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    a[i * m + j] = dot(&tangents[i], &tangents[j]);
                }
            }
            let du = crate::num::solve_linear::<f64>(&a, &g, m, "tube projection")?;
            // Backtracking damping on the gradient norm: far points make
            // the full step oscillate without it.
            let gnorm = |u: &[f64]| -> Result<f64> {
                let q = sub.embed(u)?;
                let tangents = sub.tangent_frame(u)?;
                let r: Vec<f64> = base_p.iter().zip(&q).map(|(a, b)| a - b).collect();
                Ok(tangents
                    .iter()
                    .map(|t| dot(t, &r).abs())
                    .fold(0.0, f64::max))
            };
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..25 {
                let mut trial = u.clone();
                for i in 0..m {
                    trial[i] += lambda * du[i];
                }
                self.wrap(&mut trial);
                if gnorm(&trial)? < 0.9 * grad_norm {
                    u = trial;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                break; // stalled at numerical precision
            }
        }
        if grad_norm > 1e-9 {
            return Err(GeomError::ProjectionFailed {
                point: base_p,
                residual: grad_norm,
            });
        }

        // Refinement in T arithmetic so derivative parts converge too.
        let mut ut: Vec<T> = u.iter().map(|&x| T::con(x)).collect();
        let sweeps = if T::ORDER == 0 { 0 } else { 40 };
        for _ in 0..sweeps {
            let base_u: Vec<f64> = ut.iter().map(|x| x.val()).collect();
            let embed_jets = jets(&EmbedFn(sub), &base_u, T::ORDER + 1)?;
            let delta: Vec<T> = ut
                .iter()
                .zip(&base_u)
                .map(|(x, &b)| x.clone() - T::con(b))
                .collect();
            let q: Vec<T> = embed_jets.iter().map(|j| T::from_jet(j, &delta)).collect();
            let tangents: Vec<Vec<T>> = (0..m)
                .map(|a| {
                    embed_jets
                        .iter()
                        .map(|j| T::from_jet(&j.partial(a, m), &delta))
                        .collect()
                })
                .collect();
            let r: Vec<T> = p.iter().zip(&q).map(|(a, b)| a.clone() - b.clone()).collect();
            let mut g = Vec::with_capacity(m);
            for t in &tangents {
                let mut acc = T::con(0.0);
                for (x, y) in t.iter().zip(&r) {
                    acc = acc + x.clone() * y.clone();
                }
                g.push(acc);
            }
            let mut a = vec![T::con(0.0); m * m];
            for i in 0..m {
                for j in 0..m {
                    let mut acc = T::con(0.0);
                    for (x, y) in tangents[i].iter().zip(&tangents[j]) {
                        acc = acc + x.clone() * y.clone();
                    }
                    a[i * m + j] = acc;
                }
            }
            let du = crate::num::solve_linear(&a, &g, m, "tube projection refinement")?;
            let mut change = 0.0f64;
            for i in 0..m {
                change = change.max(du[i].inf_norm());
                ut[i] = ut[i].clone() + du[i].clone();
            }
            // One sweep is exact for flat charts; curved ones contract
            // geometrically, so stop once the update stalls.
            if change < 1e-13 {
                break;
            }
        }

        let base_u: Vec<f64> = ut.iter().map(|x| x.val()).collect();
        let embed_jets = jets(&EmbedFn(sub), &base_u, T::ORDER)?;
        let delta: Vec<T> = ut
            .iter()
            .zip(&base_u)
            .map(|(x, &b)| x.clone() - T::con(b))
            .collect();
        let q: Vec<T> = embed_jets.iter().map(|j| T::from_jet(j, &delta)).collect();
        let v: Vec<T> = p.iter().zip(&q).map(|(a, b)| a.clone() - b.clone()).collect();
        self.check_radius(&base_p, &v)?;
        Ok(TubeCoords { u: ut, q, v })
    }

    fn check_radius<T: Num>(&self, point: &[f64], v: &[T]) -> Result<()> {
        let norm: f64 = v.iter().map(|x| x.val() * x.val()).sum::<f64>().sqrt();
        // Small slack: flow trajectories may graze the boundary.
        if norm > self.epsilon * 1.5 {
            return Err(GeomError::OutsideTube {
                point: point.to_vec(),
                norm,
                epsilon: self.epsilon,
            });
        }
        Ok(())
    }

    fn wrap(&self, u: &mut [f64]) {
        let sub = &self.submanifold;
        for a in 0..sub.param_dim {
            if sub.periodic[a] {
                let span = sub.box_max[a] - sub.box_min[a];
                u[a] = sub.box_min[a] + (u[a] - sub.box_min[a]).rem_euclid(span);
            }
        }
    }

    /// Round-trip injectivity probe at desk scale: rebuilding each sampled
    /// tube point from its recovered coordinates must land back on it.
    pub fn check_injectivity(&self, points: &[Vec<f64>], tol: f64) -> Result<()> {
        for p in points {
            let c = self.coords(p)?;
            let rebuilt: Vec<f64> = c.q.iter().zip(&c.v).map(|(a, b)| a + b).collect();
            let err: f64 = rebuilt
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if err > tol {
                return Err(GeomError::InvalidInput(format!(
                    "tube coordinates not injective near {p:?} (round-trip error {err:.3e})"
                )));
            }
        }
        Ok(())
    }
}

/// Exposes the foot-point projection `p -> q(p)` for jet extraction.
pub(crate) struct ProjectionFn<'a>(pub &'a TubularModel);

impl GenericFn for ProjectionFn<'_> {
    fn call_f64(&self, q: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.coords_num(q)?.q)
    }
    fn call_dual(&self, q: &[crate::num::Dual]) -> Result<Vec<crate::num::Dual>> {
        Ok(self.0.coords_num(q)?.q)
    }
    fn call_dual2(&self, q: &[crate::num::Dual2]) -> Result<Vec<crate::num::Dual2>> {
        Ok(self.0.coords_num(q)?.q)
    }
}

/// The deformation retraction `phi_t(exp(q, v)) = exp(q, t v)` of a tube
/// onto its core, with its time velocity and pushforward.
#[derive(Debug, Clone)]
pub struct RetractionFamily {
    pub tube: TubularModel,
}

impl RetractionFamily {
    pub fn new(tube: TubularModel) -> Self {
        RetractionFamily { tube }
    }

    pub fn phi(&self, t: f64, p: &[f64]) -> Result<Vec<f64>> {
        self.phi_num(t, p)
    }

    pub(crate) fn phi_num<T: Num>(&self, t: f64, p: &[T]) -> Result<Vec<T>> {
        let c = self.tube.coords_num(p)?;
        Ok(c.q
            .iter()
            .zip(&c.v)
            .map(|(q, v)| q.clone() + v.scale(t))
            .collect())
    }

    /// `d/dt phi_t(p)`, computed from tube coordinates directly, so it is
    /// well defined down to `t = 0`.
    pub fn velocity(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.tube.coords(p)?.v)
    }

    /// Pushforward Jacobian of `phi_t` at `p`:
    /// `t I + (1 - t) Dq(p)` with `Dq` the projection Jacobian.
    pub fn phi_jacobian(&self, t: f64, p: &[f64]) -> Result<Vec<f64>> {
        let n = self.tube.submanifold.ambient_dim;
        let js = jets(&ProjectionFn(&self.tube), p, 1)?;
        let mut jac = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                jac[i * n + j] = (1.0 - t) * js[i].g[j] + if i == j { t } else { 0.0 };
            }
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use approx::assert_relative_eq;

    fn point_submanifold() -> Arc<SubmanifoldModel> {
        Arc::new(
            SubmanifoldModel::new(
                2,
                vec![parse("0", 1).unwrap(), parse("0", 1).unwrap()],
                vec![],
                vec![],
                vec![],
                None,
            )
            .unwrap(),
        )
    }

    fn circle() -> Arc<SubmanifoldModel> {
        Arc::new(
            SubmanifoldModel::new(
                2,
                vec![parse("cos(x1)", 1).unwrap(), parse("sin(x1)", 1).unwrap()],
                vec![0.0],
                vec![std::f64::consts::TAU],
                vec![true],
                Some(vec![vec![parse("cos(x1)", 1).unwrap(), parse("sin(x1)", 1).unwrap()]]),
            )
            .unwrap(),
        )
    }

    #[test]
    fn point_retraction_is_radial() {
        let tube = TubularModel::new(point_submanifold(), 2.0).unwrap();
        let r = RetractionFamily::new(tube);
        let p = vec![0.4, -0.3];
        let half = r.phi(0.5, &p).unwrap();
        assert_relative_eq!(half[0], 0.2, max_relative = 1e-14);
        assert_relative_eq!(half[1], -0.15, max_relative = 1e-14);
        let vel = r.velocity(&p).unwrap();
        assert_eq!(vel, p);
        // phi_1 = id
        let one = r.phi(1.0, &p).unwrap();
        assert_eq!(one, p);
    }

    #[test]
    fn circle_projection() {
        let tube = TubularModel::new(circle(), 0.3).unwrap();
        let c = tube.coords(&[1.1, 0.1]).unwrap();
        let angle = 0.1f64.atan2(1.1);
        assert_relative_eq!(c.u[0], angle, max_relative = 1e-10);
        let r = (1.1f64 * 1.1 + 0.1 * 0.1).sqrt();
        assert_relative_eq!(
            c.v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            (r - 1.0).abs(),
            max_relative = 1e-9
        );
    }

    #[test]
    fn circle_retraction_fixes_core() {
        let tube = TubularModel::new(circle(), 0.3).unwrap();
        let r = RetractionFamily::new(tube);
        let q = vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
        for &t in &[0.0, 0.3, 0.7, 1.0] {
            let img = r.phi(t, &q).unwrap();
            assert_relative_eq!(img[0], q[0], epsilon = 1e-12);
            assert_relative_eq!(img[1], q[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_jacobian_matches_fd() {
        let tube = TubularModel::new(circle(), 0.3).unwrap();
        let r = RetractionFamily::new(tube.clone());
        let p = vec![0.9, 0.35];
        let jac = r.phi_jacobian(0.4, &p).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut pp = p.clone();
            pp[j] += h;
            let mut pm = p.clone();
            pm[j] -= h;
            let fp = r.phi(0.4, &pp).unwrap();
            let fm = r.phi(0.4, &pm).unwrap();
            for i in 0..2 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert_relative_eq!(jac[i * 2 + j], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn tube_rejects_far_points() {
        let tube = TubularModel::new(circle(), 0.1).unwrap();
        assert!(matches!(
            tube.coords(&[2.0, 0.0]),
            Err(GeomError::OutsideTube { .. })
        ));
    }

    #[test]
    fn frames_validate_on_circle() {
        let sub = circle();
        let grid = sub.chart_grid(16);
        sub.validate_frames(&grid).unwrap();
    }

    #[test]
    fn injectivity_roundtrip() {
        let tube = TubularModel::new(circle(), 0.3).unwrap();
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let a = i as f64 * 0.3;
                let r = 1.0 + 0.2 * (i as f64 * 0.7).sin();
                vec![r * a.cos(), r * a.sin()]
            })
            .collect();
        tube.check_injectivity(&pts, 1e-8).unwrap();
    }
}

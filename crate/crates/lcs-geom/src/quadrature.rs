//! Composite Gauss-Legendre quadrature on [0, 1] with panel doubling.

use std::sync::OnceLock;

use crate::error::{GeomError, Result};
use crate::num::Num;

/// Panel-doubling policy for an adaptive integral.
#[derive(Debug, Clone, Copy)]
pub struct QuadSpec {
    /// Gauss-Legendre points per panel.
    pub points: usize,
    /// Panels in the first pass.
    pub base_panels: usize,
    /// Stop when the relative change between passes drops below this.
    pub rel_tol: f64,
    /// Maximum number of doublings before reporting non-convergence.
    pub max_doublings: usize,
}

impl QuadSpec {
    /// 32 nodes to start (2 x 16), doubling until relative change <= 1e-10.
    /// Used for local potentials of closed 1-forms.
    pub fn potential() -> Self {
        QuadSpec {
            points: 16,
            base_panels: 2,
            rel_tol: 1e-10,
            max_doublings: 6,
        }
    }

    /// 16 nodes to start, doubling until relative change <= 1e-9.
    /// Used for the homotopy one-form.
    pub fn homotopy() -> Self {
        QuadSpec {
            points: 16,
            base_panels: 1,
            rel_tol: 1e-9,
            max_doublings: 6,
        }
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre polynomial. Accurate to machine precision for the sizes used.
fn gauss_legendre(m: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        // Chebyshev-based initial guess for the i-th root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_m and P_m' by the recurrence.
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, x);
        for k in 2..=m {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((x, w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn gl16() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| gauss_legendre(16))
}

/// Nodes and weights for `panels` equal panels of 16-point GL on [0, 1].
pub fn composite_nodes(points: usize, panels: usize) -> Vec<(f64, f64)> {
    let rule: Vec<(f64, f64)> = if points == 16 {
        gl16().to_vec()
    } else {
        gauss_legendre(points)
    };
    let width = 1.0 / panels as f64;
    let mut out = Vec::with_capacity(points * panels);
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * width;
        for &(x, w) in &rule {
            out.push((mid + 0.5 * width * x, 0.5 * width * w));
        }
    }
    out
}

/// Integrate a vector-valued integrand over [0, 1], doubling panels until
/// the value parts stabilize. The integrand is re-evaluated per pass.
pub(crate) fn integrate_adaptive<T: Num>(
    f: &mut dyn FnMut(f64) -> Result<Vec<T>>,
    spec: &QuadSpec,
    context: &'static str,
) -> Result<Vec<T>> {
    let mut panels = spec.base_panels;
    let mut prev: Option<Vec<T>> = None;
    let mut change = f64::INFINITY;
    for _ in 0..=spec.max_doublings {
        let nodes = composite_nodes(spec.points, panels);
        let mut acc: Option<Vec<T>> = None;
        for (t, w) in nodes {
            let vals = f(t)?;
            let weighted: Vec<T> = vals.into_iter().map(|v| v.scale(w)).collect();
            acc = Some(match acc {
                None => weighted,
                Some(a) => a
                    .into_iter()
                    .zip(weighted)
                    .map(|(x, y)| x + y)
                    .collect(),
            });
        }
        let acc = acc.unwrap_or_default();
        if let Some(p) = &prev {
            let norm: f64 = acc.iter().map(|x| x.val().abs()).fold(0.0, f64::max);
            let diff: f64 = acc
                .iter()
                .zip(p.iter())
                .map(|(a, b)| (a.val() - b.val()).abs())
                .fold(0.0, f64::max);
            change = diff / norm.max(1.0);
            if change <= spec.rel_tol {
                return Ok(acc);
            }
        }
        prev = Some(acc);
        panels *= 2;
    }
    Err(GeomError::QuadratureNoConvergence {
        context,
        change,
        panels,
    })
}

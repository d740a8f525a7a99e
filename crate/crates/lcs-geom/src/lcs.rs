//! Locally conformally symplectic structures: the twisted differential,
//! structure validation, local potentials of closed 1-forms, conformal
//! rescaling and equivalence, and patch cocycle constants.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{GeomError, Result};
use crate::forms::{nondegeneracy, CustomField, KFormField, NumDispatch};
use crate::num::{mean, pairwise_sum, Dual, Dual2};
use crate::quadrature::{integrate_adaptive, QuadSpec};
use crate::report::{CheckResult, VerificationReport};

/// A candidate LCS structure: a 2-form with its Lee form.
#[derive(Debug, Clone)]
pub struct LcsStructure {
    pub omega: KFormField,
    pub theta: KFormField,
}

impl LcsStructure {
    pub fn new(omega: KFormField, theta: KFormField) -> Result<Self> {
        if omega.k() != 2 {
            return Err(GeomError::DegreeMismatch {
                context: "LCS 2-form",
                expected: 2,
                got: omega.k(),
            });
        }
        if theta.k() != 1 {
            return Err(GeomError::DegreeMismatch {
                context: "Lee form",
                expected: 1,
                got: theta.k(),
            });
        }
        if omega.n() != theta.n() {
            return Err(GeomError::DimensionMismatch {
                context: "LCS structure",
                expected: omega.n(),
                got: theta.n(),
            });
        }
        Ok(LcsStructure { omega, theta })
    }
}

/// A star-shaped patch around a basepoint, with its sample set.
#[derive(Clone)]
pub struct StarPatch {
    pub basepoint: Vec<f64>,
    predicate: Arc<dyn Fn(&[f64]) -> bool + Send + Sync>,
    pub samples: Vec<Vec<f64>>,
}

impl Debug for StarPatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "StarPatch(basepoint={:?}, samples={})",
            self.basepoint,
            self.samples.len()
        )
    }
}

impl StarPatch {
    /// Validates membership of every sample and star-shapedness along the
    /// segment to the basepoint (probed at interior segment points).
    pub fn new(
        basepoint: Vec<f64>,
        predicate: Arc<dyn Fn(&[f64]) -> bool + Send + Sync>,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if !predicate(&basepoint) {
            return Err(GeomError::InvalidInput(
                "patch basepoint not in the patch".into(),
            ));
        }
        for p in &samples {
            if !predicate(p) {
                return Err(GeomError::InvalidInput(format!(
                    "patch sample {p:?} outside the patch"
                )));
            }
            for step in 1..16 {
                let s = step as f64 / 16.0;
                let mid: Vec<f64> = basepoint
                    .iter()
                    .zip(p)
                    .map(|(b, x)| b + s * (x - b))
                    .collect();
                if !predicate(&mid) {
                    return Err(GeomError::InvalidInput(format!(
                        "segment to {p:?} leaves the patch at s={s} (not star-shaped)"
                    )));
                }
            }
        }
        Ok(StarPatch {
            basepoint,
            predicate,
            samples,
        })
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        (self.predicate)(p)
    }
}

/// A local conformal factor: a scalar field with its anchoring data.
#[derive(Debug, Clone)]
pub struct ConformalFactor {
    pub f: KFormField,
    pub anchor_point: Vec<f64>,
    pub anchor_value: f64,
}

/// The twisted differential `d_theta w = dw - theta ^ w`.
pub fn d_theta(w: &KFormField, theta: &KFormField) -> Result<KFormField> {
    if theta.k() != 1 {
        return Err(GeomError::DegreeMismatch {
            context: "twisted differential Lee form",
            expected: 1,
            got: theta.k(),
        });
    }
    w.d().sub(&theta.wedge(w)?)
}

/// Tolerances for [`check_lcs`].
#[derive(Debug, Clone, Copy)]
pub struct LcsTolerances {
    pub closed: f64,
    pub lcs: f64,
    /// `|det A|` threshold for nondegeneracy.
    pub degeneracy_threshold: f64,
}

impl Default for LcsTolerances {
    fn default() -> Self {
        LcsTolerances {
            closed: 1e-8,
            lcs: 1e-8,
            degeneracy_threshold: 1e-10,
        }
    }
}

/// Validates an LCS structure on a sample set: Lee form closed, the LCS
/// condition `d omega = theta ^ omega`, and nondegeneracy. Failures are
/// reported, not raised.
pub fn check_lcs(
    s: &LcsStructure,
    samples: &[Vec<f64>],
    tol: &LcsTolerances,
) -> Result<VerificationReport> {
    if samples.is_empty() {
        return Err(GeomError::InvalidInput("empty sample set".into()));
    }
    let mut report = VerificationReport::new("", "check-lcs", 0, samples.len());
    let dtheta = s.theta.d();
    let residual_field = d_theta(&s.omega, &s.theta)?;
    let mut closed_res = Vec::with_capacity(samples.len());
    let mut lcs_res = Vec::with_capacity(samples.len());
    let mut min_margin = f64::INFINITY;
    let mut min_condition_margin = f64::INFINITY;
    let mut all_nondegenerate = true;
    for p in samples {
        closed_res.push(dtheta.value(p)?.max_abs());
        lcs_res.push(residual_field.value(p)?.max_abs());
        let nd = nondegeneracy(&s.omega.value(p)?, tol.degeneracy_threshold)?;
        all_nondegenerate = all_nondegenerate && nd.nondegenerate;
        min_margin = min_margin.min(nd.min_singular);
        min_condition_margin = min_condition_margin.min(1.0 / nd.condition.max(1.0));
    }
    report.push(CheckResult::from_residuals(
        "lee-form-closed",
        &closed_res,
        tol.closed,
    ));
    report.push(CheckResult::from_residuals(
        "lcs-condition",
        &lcs_res,
        tol.lcs,
    ));
    report.push(CheckResult::boolean("nondegenerate", all_nondegenerate));
    report.metric("min_singular_value", min_margin);
    report.metric("min_inverse_condition", min_condition_margin);
    Ok(report)
}

/// Radial-line-integral potential of a closed 1-form, as an evaluable
/// scalar field: `f(p) = offset + int_0^1 theta_{b+s(p-b)}(p-b) ds`.
#[derive(Clone)]
struct PotentialField {
    theta: KFormField,
    basepoint: Vec<f64>,
    offset: f64,
    quad: QuadSpec,
}

impl Debug for PotentialField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PotentialField(basepoint={:?})", self.basepoint)
    }
}

impl PotentialField {
    fn eval_generic<T: NumDispatch>(&self, p: &[T]) -> Result<Vec<T>> {
        let dir: Vec<T> = p
            .iter()
            .zip(&self.basepoint)
            .map(|(x, &b)| x.clone() - T::con(b))
            .collect();
        let mut integrand = |s: f64| -> Result<Vec<T>> {
            let x: Vec<T> = self
                .basepoint
                .iter()
                .zip(&dir)
                .map(|(&b, d)| T::con(b) + d.scale(s))
                .collect();
            let th = self.theta.eval_num(&x)?;
            let mut acc = T::con(0.0);
            for (c, d) in th.iter().zip(&dir) {
                acc = acc + c.clone() * d.clone();
            }
            Ok(vec![acc])
        };
        let mut v = integrate_adaptive(&mut integrand, &self.quad, "local potential")?;
        Ok(vec![v.remove(0) + T::con(self.offset)])
    }
}

impl CustomField for PotentialField {
    fn dim(&self) -> usize {
        self.theta.n()
    }
    fn degree(&self) -> usize {
        0
    }
    fn eval_f64(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.eval_generic(p)
    }
    fn eval_dual(&self, p: &[Dual]) -> Result<Vec<Dual>> {
        self.eval_generic(p)
    }
    fn eval_dual2(&self, p: &[Dual2]) -> Result<Vec<Dual2>> {
        self.eval_generic(p)
    }
}

/// Exact potential of a constant-coefficient 1-form. Detected from the
/// patch samples and cross-checked against the line integral, so flows
/// that evaluate the factor at every stage skip the quadrature.
#[derive(Debug, Clone)]
struct LinearPotential {
    coeffs: Vec<f64>,
    basepoint: Vec<f64>,
    offset: f64,
}

impl LinearPotential {
    fn eval_generic<T: NumDispatch>(&self, p: &[T]) -> Result<Vec<T>> {
        let mut acc = T::con(self.offset);
        for ((x, &b), &c) in p.iter().zip(&self.basepoint).zip(&self.coeffs) {
            acc = acc + (x.clone() - T::con(b)).scale(c);
        }
        Ok(vec![acc])
    }
}

impl CustomField for LinearPotential {
    fn dim(&self) -> usize {
        self.basepoint.len()
    }
    fn degree(&self) -> usize {
        0
    }
    fn eval_f64(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.eval_generic(p)
    }
    fn eval_dual(&self, p: &[Dual]) -> Result<Vec<Dual>> {
        self.eval_generic(p)
    }
    fn eval_dual2(&self, p: &[Dual2]) -> Result<Vec<Dual2>> {
        self.eval_generic(p)
    }
}

/// Local potential of a closed 1-form on a star patch, anchored at the
/// basepoint: `f(basepoint) = anchor_value` and `df = theta`.
pub fn local_potential(
    theta: &KFormField,
    patch: &StarPatch,
    anchor_value: f64,
    closed_tol: f64,
) -> Result<ConformalFactor> {
    local_potential_anchored(theta, patch, &patch.basepoint.clone(), anchor_value, closed_tol)
}

/// Local potential anchored at an arbitrary patch point, so that patch
/// families can share anchor values at designated points of Q.
pub fn local_potential_anchored(
    theta: &KFormField,
    patch: &StarPatch,
    anchor_point: &[f64],
    anchor_value: f64,
    closed_tol: f64,
) -> Result<ConformalFactor> {
    if theta.k() != 1 {
        return Err(GeomError::DegreeMismatch {
            context: "potential 1-form",
            expected: 1,
            got: theta.k(),
        });
    }
    let dtheta = theta.d();
    let mut worst = 0.0f64;
    for p in &patch.samples {
        worst = worst.max(dtheta.value(p)?.max_abs());
    }
    if worst > closed_tol {
        return Err(GeomError::NotClosed {
            name: "lee-form-closed",
            residual: worst,
            tolerance: closed_tol,
        });
    }
    let raw = PotentialField {
        theta: theta.clone(),
        basepoint: patch.basepoint.clone(),
        offset: 0.0,
        quad: QuadSpec::potential(),
    };
    let at_anchor = raw.eval_f64(anchor_point)?[0];
    let offset = anchor_value - at_anchor;

    // Constant-coefficient forms integrate in closed form; detect them on
    // the patch samples and cross-check the linear shortcut against the
    // quadrature before trusting it.
    let base_coeffs = theta.value(&patch.basepoint)?.coeffs;
    let scale = base_coeffs.iter().map(|x| x.abs()).fold(1.0, f64::max);
    let mut constant = true;
    'probe: for p in &patch.samples {
        let c = theta.value(p)?.coeffs;
        for (a, b) in c.iter().zip(&base_coeffs) {
            if (a - b).abs() > 1e-13 * scale {
                constant = false;
                break 'probe;
            }
        }
    }
    if constant {
        let lin = LinearPotential {
            coeffs: base_coeffs,
            basepoint: patch.basepoint.clone(),
            offset,
        };
        let mut agrees = true;
        for p in patch.samples.iter().take(3) {
            let a = lin.eval_f64(p)?[0];
            let b = raw.eval_f64(p)?[0] + offset;
            if (a - b).abs() > 1e-10 * (1.0 + b.abs()) {
                agrees = false;
                break;
            }
        }
        if agrees {
            return Ok(ConformalFactor {
                f: KFormField::custom(Arc::new(lin)),
                anchor_point: anchor_point.to_vec(),
                anchor_value,
            });
        }
    }

    let field = PotentialField { offset, ..raw };
    Ok(ConformalFactor {
        f: KFormField::custom(Arc::new(field)),
        anchor_point: anchor_point.to_vec(),
        anchor_value,
    })
}

/// `e^{sign * f} * w`.
pub fn conformal_rescale(w: &KFormField, f: &ConformalFactor, sign: f64) -> Result<KFormField> {
    w.exp_scale(&f.f, sign)
}

/// Result of sampling-based conformal-equivalence recovery.
#[derive(Debug, Clone)]
pub struct ConformalEquivalence {
    /// Recovered factor `g(p)` per sample; `None` where `w_b` vanished.
    pub factors: Vec<Option<f64>>,
    pub check: CheckResult,
    pub excluded: usize,
}

/// Per point, recover `g` with `w_a = e^g w_b` from the largest-magnitude
/// coefficient of `w_b`, then validate every coefficient.
pub fn conformal_equivalence(
    w_a: &KFormField,
    w_b: &KFormField,
    samples: &[Vec<f64>],
    tol: f64,
) -> Result<ConformalEquivalence> {
    let mut factors = Vec::with_capacity(samples.len());
    let mut residuals = Vec::with_capacity(samples.len());
    let mut excluded = 0;
    for p in samples {
        let va = w_a.value(p)?;
        let vb = w_b.value(p)?;
        let (idx, lead) = vb
            .coeffs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, c)| (i, *c))
            .unwrap_or((0, 0.0));
        if lead.abs() < 1e-12 {
            factors.push(None);
            excluded += 1;
            continue;
        }
        let ratio = va.coeffs[idx] / lead;
        if ratio <= 0.0 {
            // No real log: report the raw coefficient mismatch.
            factors.push(None);
            residuals.push(va.sub(&vb).max_abs().max(tol * 2.0));
            continue;
        }
        let g = ratio.ln();
        let scaled = vb.scale(ratio);
        residuals.push(va.sub(&scaled).max_abs());
        factors.push(Some(g));
    }
    let mut check = CheckResult::from_residuals("conformal-equivalence", &residuals, tol);
    if excluded > 0 {
        check = check.with_detail(format!("{excluded} samples excluded (w_b vanished)"));
    }
    Ok(ConformalEquivalence {
        factors,
        check,
        excluded,
    })
}

/// Outcome of the cocycle-constant estimate on an overlap.
#[derive(Debug, Clone)]
pub struct TransitionConstant {
    pub c: f64,
    pub deviation: f64,
    pub check: CheckResult,
}

/// `c = mean(f_a - f_b)` over overlap samples; passes when the sample
/// standard deviation stays within tolerance (the difference of two
/// potentials of the same closed form is locally constant).
pub fn transition_constant(
    f_a: &ConformalFactor,
    f_b: &ConformalFactor,
    overlap: &[Vec<f64>],
    tol: f64,
) -> Result<TransitionConstant> {
    if overlap.is_empty() {
        return Err(GeomError::EmptyOverlap);
    }
    let mut diffs = Vec::with_capacity(overlap.len());
    for p in overlap {
        let a = f_a.f.value(p)?.coeffs[0];
        let b = f_b.f.value(p)?.coeffs[0];
        diffs.push(a - b);
    }
    let c = mean(&diffs);
    let sq: Vec<f64> = diffs.iter().map(|d| (d - c) * (d - c)).collect();
    let deviation = (pairwise_sum(&sq) / sq.len() as f64).sqrt();
    let check = CheckResult::from_residuals("transition-constant", &[deviation], tol)
        .with_detail(format!("c = {c:.12e}"));
    Ok(TransitionConstant {
        c,
        deviation,
        check,
    })
}

/// A ball patch predicate.
pub fn ball_patch(center: Vec<f64>, radius: f64, samples: Vec<Vec<f64>>) -> Result<StarPatch> {
    let c = center.clone();
    StarPatch::new(
        center,
        Arc::new(move |p: &[f64]| {
            p.iter()
                .zip(&c)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
                <= radius
        }),
        samples,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::multiindex::rank;
    use approx::assert_relative_eq;

    fn grid2(lo: f64, hi: f64, m: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for i in 0..m {
            for j in 0..m {
                let fx = (i as f64 + 0.5) / m as f64;
                let fy = (j as f64 + 0.5) / m as f64;
                out.push(vec![lo + fx * (hi - lo), lo + fy * (hi - lo)]);
            }
        }
        out
    }

    fn all_patch(basepoint: Vec<f64>, samples: Vec<Vec<f64>>) -> StarPatch {
        StarPatch::new(basepoint, Arc::new(|_: &[f64]| true), samples).unwrap()
    }

    #[test]
    fn d_theta_untwisted_limit() {
        let w = KFormField::from_exprs(2, 1, &[(vec![2], parse("x1*x2", 2).unwrap())]).unwrap();
        let zero = KFormField::zero(2, 1);
        let tw = d_theta(&w, &zero).unwrap();
        let dw = w.d();
        for p in grid2(-1.0, 1.0, 4) {
            let a = tw.value(&p).unwrap();
            let b = dw.value(&p).unwrap();
            assert_relative_eq!(a.coeffs[0], b.coeffs[0], epsilon = 1e-13);
        }
    }

    #[test]
    fn d_theta_kills_exponentially_rescaled_closed_forms() {
        // w = e^f w0 with w0 = dx1^dx2 closed, theta = df, f = x1*x2
        let f = KFormField::scalar_from_expr(2, parse("x1*x2", 2).unwrap());
        let w0 = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let w = w0.exp_scale(&f, 1.0).unwrap();
        let theta = f.d();
        let tw = d_theta(&w, &theta).unwrap();
        for p in grid2(-0.8, 0.8, 4) {
            assert!(tw.value(&p).unwrap().max_abs() < 1e-8);
        }
    }

    #[test]
    fn d_theta_twisted_nilpotence() {
        let w = KFormField::from_exprs(
            3,
            1,
            &[
                (vec![1], parse("sin(x2)*x3", 3).unwrap()),
                (vec![3], parse("x1^2", 3).unwrap()),
            ],
        )
        .unwrap();
        let theta = KFormField::scalar_from_expr(3, parse("x1 + x2*x3", 3).unwrap()).d();
        let twice = d_theta(&d_theta(&w, &theta).unwrap(), &theta).unwrap();
        for p in [[0.3, -0.5, 0.8], [1.0, 0.2, -0.4]] {
            assert!(twice.value(&p).unwrap().max_abs() < 1e-7);
        }
    }

    #[test]
    fn check_lcs_standard_symplectic_passes() {
        let omega = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let theta = KFormField::zero(2, 1);
        let s = LcsStructure::new(omega, theta).unwrap();
        let r = check_lcs(&s, &grid2(-1.0, 1.0, 3), &LcsTolerances::default()).unwrap();
        assert!(r.pass);
        assert!(r.check("lee-form-closed").unwrap().pass);
    }

    #[test]
    fn check_lcs_fails_on_wrong_lee_form() {
        // omega standard (closed) but theta = dx1: d omega = 0 != theta ^ omega
        let mut coeffs = vec![0.0; 6];
        coeffs[rank(4, &[0, 2])] = 1.0;
        coeffs[rank(4, &[1, 3])] = 1.0;
        let omega = KFormField::constant(4, 2, coeffs).unwrap();
        let theta = KFormField::constant(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = LcsStructure::new(omega, theta).unwrap();
        let samples: Vec<Vec<f64>> = grid2(-1.0, 1.0, 2)
            .into_iter()
            .map(|p| vec![p[0], p[1], 0.3, -0.4])
            .collect();
        let r = check_lcs(&s, &samples, &LcsTolerances::default()).unwrap();
        assert!(!r.pass);
        assert!(!r.check("lcs-condition").unwrap().pass);
        assert!(r.check("lee-form-closed").unwrap().pass);
    }

    #[test]
    fn lcs_condition_on_4d_twisted_form() {
        // omega = e^{x1} (dx1^dx3 + dx2^dx4), theta = dx1
        let mut coeffs = vec![0.0; 6];
        coeffs[rank(4, &[0, 2])] = 1.0;
        coeffs[rank(4, &[1, 3])] = 1.0;
        let base = KFormField::constant(4, 2, coeffs).unwrap();
        let f = KFormField::scalar_from_expr(4, parse("x1", 4).unwrap());
        let omega = base.exp_scale(&f, 1.0).unwrap();
        let theta = KFormField::constant(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = LcsStructure::new(omega, theta).unwrap();
        let samples: Vec<Vec<f64>> = vec![
            vec![0.1, -0.2, 0.3, 0.4],
            vec![-0.5, 0.6, -0.1, 0.2],
            vec![0.0, 0.0, 0.0, 0.0],
        ];
        let r = check_lcs(&s, &samples, &LcsTolerances::default()).unwrap();
        assert!(r.pass, "{}", r.to_json());
    }

    #[test]
    fn potential_of_constant_form_is_linear() {
        let theta = KFormField::constant(2, 1, vec![1.0, 0.0]).unwrap();
        let patch = all_patch(vec![0.0, 0.0], grid2(-1.0, 1.0, 3));
        let f = local_potential(&theta, &patch, 0.0, 1e-10).unwrap();
        for p in grid2(-1.0, 1.0, 4) {
            assert_relative_eq!(f.f.value(&p).unwrap().coeffs[0], p[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn potential_of_zero_is_anchor() {
        let theta = KFormField::zero(2, 1);
        let patch = all_patch(vec![0.3, 0.1], grid2(-1.0, 1.0, 2));
        let f = local_potential(&theta, &patch, 2.5, 1e-10).unwrap();
        assert_relative_eq!(f.f.value(&[0.9, -0.4]).unwrap().coeffs[0], 2.5, epsilon = 1e-13);
    }

    #[test]
    fn potential_matches_analytic_antiderivative() {
        // theta = d(sin(x1*x2)); basepoint b; oracle: independent closed form.
        let g = KFormField::scalar_from_expr(2, parse("sin(x1*x2)", 2).unwrap());
        let theta = g.d();
        let b = vec![0.2, -0.3];
        let patch = all_patch(b.clone(), grid2(-1.0, 1.0, 3));
        let f = local_potential(&theta, &patch, 0.0, 1e-8).unwrap();
        let gb = (b[0] * b[1]).sin();
        for p in grid2(-1.0, 1.0, 4) {
            let expect = (p[0] * p[1]).sin() - gb;
            assert_relative_eq!(f.f.value(&p).unwrap().coeffs[0], expect, epsilon = 1e-8);
        }
    }

    #[test]
    fn potential_rejects_nonclosed_form() {
        // theta = x2 dx1 is not closed
        let theta = KFormField::from_exprs(2, 1, &[(vec![1], parse("x2", 2).unwrap())]).unwrap();
        let patch = all_patch(vec![0.0, 0.0], grid2(-1.0, 1.0, 2));
        assert!(matches!(
            local_potential(&theta, &patch, 0.0, 1e-8),
            Err(GeomError::NotClosed { .. })
        ));
    }

    #[test]
    fn potential_differentiates_back_to_theta() {
        let g = KFormField::scalar_from_expr(2, parse("exp(x1)*cos(x2)", 2).unwrap());
        let theta = g.d();
        let patch = all_patch(vec![0.0, 0.0], grid2(-0.8, 0.8, 3));
        let f = local_potential(&theta, &patch, 0.0, 1e-8).unwrap();
        let df = f.f.d();
        for p in grid2(-0.8, 0.8, 3) {
            let a = df.value(&p).unwrap();
            let b = theta.value(&p).unwrap();
            for (x, y) in a.coeffs.iter().zip(&b.coeffs) {
                assert_relative_eq!(x, y, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn rescale_round_trip() {
        let w = KFormField::from_exprs(2, 2, &[(vec![1, 2], parse("2 + x2", 2).unwrap())]).unwrap();
        let theta = KFormField::constant(2, 1, vec![1.0, 0.0]).unwrap();
        let patch = all_patch(vec![0.0, 0.0], grid2(-1.0, 1.0, 2));
        let f = local_potential(&theta, &patch, 0.7, 1e-10).unwrap();
        let back = conformal_rescale(&conformal_rescale(&w, &f, -1.0).unwrap(), &f, 1.0).unwrap();
        for p in grid2(-1.0, 1.0, 3) {
            assert_relative_eq!(
                w.value(&p).unwrap().coeffs[0],
                back.value(&p).unwrap().coeffs[0],
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn rescaled_lcs_form_is_closed() {
        // omega = e^{x1} dx1^dx2 with theta = dx1; e^{-f} omega closed.
        let f0 = KFormField::scalar_from_expr(2, parse("x1", 2).unwrap());
        let omega = KFormField::constant(2, 2, vec![1.0])
            .unwrap()
            .exp_scale(&f0, 1.0)
            .unwrap();
        let theta = KFormField::constant(2, 1, vec![1.0, 0.0]).unwrap();
        let patch = all_patch(vec![0.0, 0.0], grid2(-1.0, 1.0, 3));
        let f = local_potential(&theta, &patch, 0.0, 1e-10).unwrap();
        let eta = conformal_rescale(&omega, &f, -1.0).unwrap();
        let deta = eta.d();
        for p in grid2(-1.0, 1.0, 3) {
            assert!(deta.value(&p).unwrap().max_abs() < 1e-7);
        }
    }

    #[test]
    fn conformal_equivalence_recovers_factor() {
        let base = KFormField::constant(4, 2, vec![1.0, 0.5, 0.0, -0.25, 0.0, 1.0]).unwrap();
        let g = KFormField::scalar_from_expr(4, parse("x1", 4).unwrap());
        let scaled = base.exp_scale(&g, 1.0).unwrap();
        let samples: Vec<Vec<f64>> =
            vec![vec![0.3, 0.1, -0.2, 0.5], vec![-0.7, 0.0, 0.4, 0.1]];
        let eq = conformal_equivalence(&scaled, &base, &samples, 1e-9).unwrap();
        assert!(eq.check.pass);
        for (p, g) in samples.iter().zip(&eq.factors) {
            assert_relative_eq!(g.unwrap(), p[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn conformal_equivalence_identity_and_perturbation() {
        let base = KFormField::constant(4, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let eq = conformal_equivalence(&base, &base, &[vec![0.0; 4]], 1e-12).unwrap();
        assert!(eq.check.pass);
        assert_relative_eq!(eq.factors[0].unwrap(), 0.0);

        // non-conformal perturbation: add dx1^dx2 only
        let mut pert_coeffs = vec![0.0; 6];
        pert_coeffs[rank(4, &[0, 1])] = 1.0;
        let pert = base
            .add(&KFormField::constant(4, 2, pert_coeffs).unwrap())
            .unwrap();
        let eq = conformal_equivalence(&pert, &base, &[vec![0.0; 4]], 1e-9).unwrap();
        assert!(!eq.check.pass);
    }

    #[test]
    fn conformal_equivalence_symmetry() {
        let base = KFormField::constant(2, 2, vec![2.0]).unwrap();
        let g = KFormField::scalar_from_expr(2, parse("x2", 2).unwrap());
        let scaled = base.exp_scale(&g, 1.0).unwrap();
        let samples = vec![vec![0.4, -0.9]];
        let fwd = conformal_equivalence(&scaled, &base, &samples, 1e-10).unwrap();
        let bwd = conformal_equivalence(&base, &scaled, &samples, 1e-10).unwrap();
        assert_relative_eq!(
            fwd.factors[0].unwrap(),
            -bwd.factors[0].unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn transition_constants() {
        let theta = KFormField::constant(2, 1, vec![2.0, 0.0]).unwrap();
        let overlap = grid2(-0.5, 0.5, 3);
        let pa = all_patch(vec![0.0, 0.0], overlap.clone());
        let pb = all_patch(vec![1.0, 0.0], overlap.clone());
        let fa = local_potential(&theta, &pa, 0.0, 1e-10).unwrap();
        let fb = local_potential(&theta, &pb, 0.0, 1e-10).unwrap();
        // f_a(p) = 2 p1, f_b(p) = 2(p1 - 1): c = 2.
        let t = transition_constant(&fa, &fb, &overlap, 1e-9).unwrap();
        assert!(t.check.pass);
        assert_relative_eq!(t.c, 2.0, epsilon = 1e-10);
        assert!(transition_constant(&fa, &fb, &[], 1e-9).is_err());
    }

    #[test]
    fn star_patch_validation() {
        // annulus is not star-shaped from a boundary point
        let pred = Arc::new(|p: &[f64]| {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            (0.5..=1.5).contains(&r)
        });
        let good = StarPatch::new(vec![1.0, 0.0], pred.clone(), vec![vec![1.2, 0.3]]);
        assert!(good.is_ok());
        let bad = StarPatch::new(vec![1.0, 0.0], pred, vec![vec![-1.0, 0.0]]);
        assert!(bad.is_err());
    }

    #[test]
    fn conformal_transport_of_lcs_condition() {
        // if (omega, theta) is LCS then (e^g omega, theta + dg) is LCS.
        let mut coeffs = vec![0.0; 6];
        coeffs[rank(4, &[0, 2])] = 1.0;
        coeffs[rank(4, &[1, 3])] = 1.0;
        let base = KFormField::constant(4, 2, coeffs).unwrap();
        let f = KFormField::scalar_from_expr(4, parse("x1", 4).unwrap());
        let omega = base.exp_scale(&f, 1.0).unwrap();
        let theta = KFormField::constant(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let g = KFormField::scalar_from_expr(4, parse("sin(x2)*x4", 4).unwrap());
        let omega2 = omega.exp_scale(&g, 1.0).unwrap();
        let theta2 = theta.add(&g.d()).unwrap();
        let s = LcsStructure::new(omega2, theta2).unwrap();
        let samples = vec![vec![0.1, 0.2, -0.3, 0.4], vec![-0.2, 0.5, 0.1, -0.6]];
        let tol = LcsTolerances {
            lcs: 1e-6,
            ..Default::default()
        };
        let r = check_lcs(&s, &samples, &tol).unwrap();
        assert!(r.pass, "{}", r.to_json());
    }
}

//! The Moser-trick engine: the homotopy one-form on a tube, the Moser
//! vector field, the nonautonomous flow with Jacobian transport, and the
//! Darboux-Weinstein driver with multi-patch gluing checks.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{GeomError, Result};
use crate::forms::{
    deltas, nondegeneracy, pullback_value, skew_matrix, CustomField, KFormField, NumDispatch,
    SmoothMap,
};
use crate::lcs::{local_potential_anchored, ConformalFactor, StarPatch};
use crate::num::{jets, solve_linear, Dual, Dual2, Num};
use crate::quadrature::{integrate_adaptive, QuadSpec};
use crate::report::{max_abs, CheckResult, VerificationReport};
use crate::tube::{ProjectionFn, RetractionFamily, TubularModel};

// ---------------------------------------------------------------------------
// Homotopy one-form
// ---------------------------------------------------------------------------

/// The homotopy primitive of a closed 2-form on a tube retracting onto its
/// core: `sigma = int_0^1 rho_t dt` with
/// `(rho_t)_p(e) = tau_{phi_t(p)}(velocity, phi_t-pushforward of e)`.
/// The velocity is the normal component of the tube coordinates, which is
/// defined for all `t` in [0, 1] including `t = 0`.
struct HomotopySigmaField {
    tau: KFormField,
    tube: TubularModel,
    quad: QuadSpec,
}

impl Debug for HomotopySigmaField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HomotopySigmaField")
    }
}

impl HomotopySigmaField {
    fn eval_generic<T: NumDispatch>(&self, p: &[T]) -> Result<Vec<T>> {
        let n = self.tube.submanifold.ambient_dim;
        let coords = self.tube.coords_num(p)?;
        let base_p: Vec<f64> = p.iter().map(|x| x.val()).collect();
        // Projection Jacobian Dq, propagated into T arithmetic.
        let js = jets(&ProjectionFn(&self.tube), &base_p, T::ORDER + 1)?;
        let delta = deltas(p, &base_p);
        let mut dq = vec![T::con(0.0); n * n];
        for (i, jet) in js.iter().enumerate() {
            for j in 0..n {
                dq[i * n + j] = T::from_jet(&jet.partial(j, n), &delta);
            }
        }
        let pairs = crate::multiindex::multi_indices(n, 2);
        let mut integrand = |t: f64| -> Result<Vec<T>> {
            // x_t = q + t v, pushforward J_t = t I + (1 - t) Dq.
            let x: Vec<T> = coords
                .q
                .iter()
                .zip(&coords.v)
                .map(|(q, v)| q.clone() + v.scale(t))
                .collect();
            let tc = self.tau.eval_num(&x)?;
            let mut out = Vec::with_capacity(n);
            for l in 0..n {
                // column l of J_t
                let b: Vec<T> = (0..n)
                    .map(|j| {
                        let mut e = dq[j * n + l].scale(1.0 - t);
                        if j == l {
                            e = e + T::con(t);
                        }
                        e
                    })
                    .collect();
                let mut acc = T::con(0.0);
                for (r, idx) in pairs.iter().enumerate() {
                    let (i, j) = (idx[0], idx[1]);
                    let term = coords.v[i].clone() * b[j].clone()
                        - coords.v[j].clone() * b[i].clone();
                    acc = acc + tc[r].clone() * term;
                }
                out.push(acc);
            }
            Ok(out)
        };
        integrate_adaptive(&mut integrand, &self.quad, "homotopy one-form")
    }
}

impl CustomField for HomotopySigmaField {
    fn dim(&self) -> usize {
        self.tube.submanifold.ambient_dim
    }
    fn degree(&self) -> usize {
        1
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

/// Build the homotopy one-form `sigma` with `d sigma = tau` on the tube
/// and `sigma = 0` along the core.
pub fn homotopy_sigma(tau: &KFormField, r: &RetractionFamily, quad: QuadSpec) -> Result<KFormField> {
    let n = r.tube.submanifold.ambient_dim;
    if tau.k() != 2 || tau.n() != n {
        return Err(GeomError::DegreeMismatch {
            context: "homotopy input form",
            expected: 2,
            got: tau.k(),
        });
    }
    Ok(KFormField::custom(Arc::new(HomotopySigmaField {
        tau: tau.clone(),
        tube: r.tube.clone(),
        quad,
    })))
}

// ---------------------------------------------------------------------------
// Moser vector field and flow
// ---------------------------------------------------------------------------

/// Pointwise Moser field: the unique `Y` with `i_Y eta = -sigma`, i.e. the
/// solution of `A Y = sigma` for the skew matrix `A_ij = eta(e_i, e_j)`
/// (contraction in the first slot).
pub(crate) fn moser_solve<T: Num>(n: usize, eta: &[T], sigma: &[T]) -> Result<Vec<T>> {
    let a = skew_matrix(n, eta);
    solve_linear(&a, sigma, n, "moser field")
}

/// Pointwise Moser field from form values, with a residual guarantee.
pub fn moser_field_value(
    eta: &crate::forms::KFormValue,
    sigma: &crate::forms::KFormValue,
) -> Result<crate::forms::VectorFieldValue> {
    let n = eta.n;
    let y = moser_solve::<f64>(n, &eta.coeffs, &sigma.coeffs)?;
    let a = skew_matrix::<f64>(n, &eta.coeffs);
    let scale = sigma.coeffs.iter().map(|c| c.abs()).fold(1.0, f64::max);
    for i in 0..n {
        let r: f64 = (0..n).map(|j| a[i * n + j] * y[j]).sum::<f64>() - sigma.coeffs[i];
        if r.abs() > 1e-12 * scale {
            return Err(GeomError::InvalidInput(format!(
                "moser solve residual {:.3e} exceeds 1e-12 relative",
                r.abs() / scale
            )));
        }
    }
    Ok(crate::forms::VectorFieldValue { components: y })
}

/// The time-dependent Moser system `eta_t = eta0 + t (eta1 - eta0)` with
/// its homotopy one-form.
#[derive(Debug, Clone)]
pub struct MoserSystem {
    pub eta0: KFormField,
    pub eta1: KFormField,
    pub sigma: KFormField,
    /// `|det A|` threshold below which the flow aborts.
    pub degeneracy_threshold: f64,
}

impl MoserSystem {
    pub fn new(eta0: KFormField, eta1: KFormField, sigma: KFormField) -> Result<Self> {
        if eta0.n() != eta1.n() || eta0.n() != sigma.n() {
            return Err(GeomError::DimensionMismatch {
                context: "moser system",
                expected: eta0.n(),
                got: eta1.n().max(sigma.n()),
            });
        }
        Ok(MoserSystem {
            eta0,
            eta1,
            sigma,
            degeneracy_threshold: 1e-10,
        })
    }

    fn eta_t_coeffs<T: NumDispatch>(&self, t: f64, p: &[T]) -> Result<Vec<T>> {
        let a0 = self.eta0.eval_num(p)?;
        let a1 = self.eta1.eval_num(p)?;
        Ok(a0
            .iter()
            .zip(&a1)
            .map(|(x, y)| x.scale(1.0 - t) + y.scale(t))
            .collect())
    }

    /// `Y_t(p)` with its spatial Jacobian (row-major `n x n`) and the
    /// nondegeneracy margin of `eta_t` at `p`.
    pub fn field(&self, t: f64, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let n = self.eta0.n();
        let seeded: Vec<Dual> = p
            .iter()
            .enumerate()
            .map(|(i, &x)| Dual::var(i, x, n))
            .collect();
        let eta = self.eta_t_coeffs(t, &seeded)?;
        let sig = self.sigma.eval_num(&seeded)?;
        let eta_vals = crate::forms::KFormValue::from_coeffs(
            n,
            2,
            eta.iter().map(|c| c.val()).collect(),
        )?;
        let nd = nondegeneracy(&eta_vals, self.degeneracy_threshold)?;
        if !nd.nondegenerate {
            return Err(GeomError::Degenerate {
                context: "eta_t along the moser flow",
                point: p.to_vec(),
                margin: nd.min_singular,
                threshold: self.degeneracy_threshold,
            });
        }
        let y = moser_solve::<Dual>(n, &eta, &sig)?;
        let mut value = Vec::with_capacity(n);
        let mut jac = vec![0.0; n * n];
        for (i, yi) in y.iter().enumerate() {
            value.push(yi.v);
            for j in 0..n {
                jac[i * n + j] = yi.g.get(j).copied().unwrap_or(0.0);
            }
        }
        Ok((value, jac, nd.min_singular))
    }

    /// Integrate the flow from the seeds with classical RK4 and the
    /// variational equation `dJ/dt = DY J`. `steps` must be a positive
    /// multiple of 4 so the quarter-time checkpoints land on step ends.
    pub fn flow(&self, seeds: &[Vec<f64>], steps: usize) -> Result<MoserFlowResult> {
        if steps == 0 || steps % 4 != 0 {
            return Err(GeomError::InvalidInput(
                "flow step count must be a positive multiple of 4".into(),
            ));
        }
        // Trajectories are independent; integrate them on a small thread
        // pool in contiguous chunks so the record order (and hence every
        // downstream report) stays deterministic.
        let workers = std::thread::available_parallelism()
            .map(|x| x.get())
            .unwrap_or(1)
            .min(seeds.len().max(1));
        if workers > 1 && seeds.len() > 1 {
            let chunk = seeds.len().div_ceil(workers);
            let results: Vec<Result<Vec<SeedRecord>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = seeds
                    .chunks(chunk)
                    .map(|part| {
                        scope.spawn(move || {
                            part.iter().map(|s| self.flow_one(s, steps)).collect()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("flow worker")).collect()
            });
            let mut records = Vec::with_capacity(seeds.len());
            for part in results {
                records.extend(part?);
            }
            return Ok(MoserFlowResult { records, steps });
        }
        let records = seeds
            .iter()
            .map(|s| self.flow_one(s, steps))
            .collect::<Result<Vec<_>>>()?;
        Ok(MoserFlowResult { records, steps })
    }

    fn flow_one(&self, seed: &[f64], steps: usize) -> Result<SeedRecord> {
        let n = self.eta0.n();
        let h = 1.0 / steps as f64;
        {
            let mut p = seed.to_vec();
            let mut jac: Vec<f64> = (0..n * n)
                .map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 })
                .collect();
            let mut checkpoints = Vec::with_capacity(4);
            let mut max_field_norm = 0.0f64;
            let mut min_margin = f64::INFINITY;
            for step in 0..steps {
                let t = step as f64 * h;
                let mut stage = |ts: f64, ps: &[f64], js: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
                    let (y, dy, margin) = self.field(ts, ps)?;
                    min_margin = min_margin.min(margin);
                    let norm = y.iter().map(|x| x.abs()).fold(0.0, f64::max);
                    max_field_norm = max_field_norm.max(norm);
                    let mut jdot = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for l in 0..n {
                                acc += dy[i * n + l] * js[l * n + j];
                            }
                            jdot[i * n + j] = acc;
                        }
                    }
                    Ok((y, jdot))
                };
                let (k1p, k1j) = stage(t, &p, &jac)?;
                let half = |base: &[f64], k: &[f64], c: f64| -> Vec<f64> {
                    base.iter().zip(k).map(|(b, x)| b + c * h * x).collect()
                };
                let (k2p, k2j) = stage(t + 0.5 * h, &half(&p, &k1p, 0.5), &half(&jac, &k1j, 0.5))?;
                let (k3p, k3j) = stage(t + 0.5 * h, &half(&p, &k2p, 0.5), &half(&jac, &k2j, 0.5))?;
                let (k4p, k4j) = stage(t + h, &half(&p, &k3p, 1.0), &half(&jac, &k3j, 1.0))?;
                for i in 0..n {
                    p[i] += h / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
                }
                for i in 0..n * n {
                    jac[i] += h / 6.0 * (k1j[i] + 2.0 * k2j[i] + 2.0 * k3j[i] + k4j[i]);
                }
                if (step + 1) % (steps / 4) == 0 {
                    checkpoints.push(Checkpoint {
                        t: (step + 1) as f64 * h,
                        point: p.clone(),
                        jacobian: jac.clone(),
                    });
                }
            }
            Ok(SeedRecord {
                seed: seed.to_vec(),
                image: p,
                jacobian: jac,
                checkpoints,
                max_field_norm,
                min_margin,
            })
        }
    }
}

/// Flow state at one of the quarter-time checkpoints.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub t: f64,
    pub point: Vec<f64>,
    pub jacobian: Vec<f64>,
}

/// One integrated trajectory with its transported Jacobian.
#[derive(Debug, Clone)]
pub struct SeedRecord {
    pub seed: Vec<f64>,
    pub image: Vec<f64>,
    pub jacobian: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub max_field_norm: f64,
    pub min_margin: f64,
}

#[derive(Debug, Clone)]
pub struct MoserFlowResult {
    pub records: Vec<SeedRecord>,
    pub steps: usize,
}

impl MoserFlowResult {
    /// Per-record, per-checkpoint residual of `phi_t^* eta_t = eta0`.
    pub fn invariance_residuals(&self, system: &MoserSystem) -> Result<Vec<f64>> {
        let n = system.eta0.n();
        let mut out = Vec::new();
        for rec in &self.records {
            let ref_val = system.eta0.value(&rec.seed)?;
            for cp in &rec.checkpoints {
                let coeffs = system.eta_t_coeffs::<f64>(cp.t, &cp.point)?;
                let eta_t = crate::forms::KFormValue::from_coeffs(n, 2, coeffs)?;
                let pulled = pullback_value(&eta_t, &cp.jacobian, n);
                out.push(pulled.sub(&ref_val).max_abs());
            }
        }
        Ok(out)
    }

    pub fn min_margin(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.min_margin)
            .fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// Darboux-Weinstein driver
// ---------------------------------------------------------------------------

/// One patch of the Darboux-Weinstein cover: a star-shaped region, the
/// designated anchor point on Q, flow seeds in the tube and samples on Q.
#[derive(Debug, Clone)]
pub struct DwPatch {
    pub patch: StarPatch,
    pub anchor: Vec<f64>,
    pub q_samples: Vec<Vec<f64>>,
}

/// Pinned tolerances of the Darboux-Weinstein pipeline.
#[derive(Debug, Clone, Copy)]
pub struct DwTolerances {
    /// Max coefficient difference of the two forms on T_qM along Q.
    pub forms_equal_on_q: f64,
    /// Lee forms agree on TQ (contraction with the tangent frame).
    pub theta_on_tq: f64,
    pub closed: f64,
    pub sigma_on_q: f64,
    pub homotopy: f64,
    pub invariance: f64,
    pub q_fixed: f64,
    pub conclusion: f64,
    pub degeneracy_threshold: f64,
}

impl Default for DwTolerances {
    fn default() -> Self {
        DwTolerances {
            forms_equal_on_q: 1e-10,
            theta_on_tq: 1e-10,
            closed: 1e-8,
            sigma_on_q: 1e-9,
            homotopy: 1e-5,
            invariance: 1e-4,
            q_fixed: 1e-9,
            conclusion: 1e-4,
            degeneracy_threshold: 1e-10,
        }
    }
}

/// Everything produced for one patch.
#[derive(Debug, Clone)]
pub struct DwPatchResult {
    pub f0: ConformalFactor,
    pub f1: ConformalFactor,
    pub sigma: KFormField,
    pub system: MoserSystem,
    pub flow: MoserFlowResult,
    /// Recovered factor `g = f0 - f1 o phi` at the patch seeds.
    pub factor_samples: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DwResult {
    pub patches: Vec<DwPatchResult>,
    pub report: VerificationReport,
}

pub struct DwInput {
    pub omega0: KFormField,
    pub omega1: KFormField,
    pub theta0: KFormField,
    pub theta1: KFormField,
    pub tube: TubularModel,
    pub patches: Vec<DwPatch>,
    pub steps: usize,
    pub tol: DwTolerances,
}

fn hypothesis(name: &str, detail: String) -> GeomError {
    GeomError::Hypothesis {
        name: name.to_string(),
        detail,
    }
}

/// The full constructive pipeline: hypothesis checks, per-patch conformal
/// rescale, homotopy one-form, Moser flow, and the conformal conclusion
/// `omega0 = e^{f0 - f1 o phi} phi^* omega1` with `phi` fixing Q.
pub fn darboux_weinstein(input: &DwInput) -> Result<DwResult> {
    let DwInput {
        omega0,
        omega1,
        theta0,
        theta1,
        tube,
        patches,
        steps,
        tol,
    } = input;
    let n = omega0.n();
    let sub = &tube.submanifold;
    let mut report = VerificationReport::new("", "darboux", 0, 0);

    // Hypotheses, checked on a chart grid of Q.
    let q_grid: Vec<Vec<f64>> = sub
        .chart_grid(8)
        .iter()
        .map(|u| sub.embed(u))
        .collect::<Result<_>>()?;
    let mut eq_res = Vec::new();
    let mut th_res = Vec::new();
    for (u, q) in sub.chart_grid(8).iter().zip(&q_grid) {
        let w0 = omega0.value(q)?;
        let w1 = omega1.value(q)?;
        eq_res.push(w0.sub(&w1).max_abs());
        let nd0 = nondegeneracy(&w0, tol.degeneracy_threshold)?;
        let nd1 = nondegeneracy(&w1, tol.degeneracy_threshold)?;
        if !nd0.nondegenerate || !nd1.nondegenerate {
            return Err(hypothesis(
                "nondegenerate",
                format!("omega degenerate at {q:?}"),
            ));
        }
        let t0 = theta0.value(q)?;
        let t1 = theta1.value(q)?;
        for tan in sub.tangent_frame(u)? {
            let v = crate::forms::VectorFieldValue { components: tan };
            let a = t0.interior(&v)?.coeffs[0];
            let b = t1.interior(&v)?.coeffs[0];
            th_res.push((a - b).abs());
        }
    }
    let worst_eq = max_abs(&eq_res);
    if worst_eq > tol.forms_equal_on_q {
        return Err(hypothesis(
            "forms-equal-on-q",
            format!("max coefficient difference {worst_eq:.3e} > {:.3e}", tol.forms_equal_on_q),
        ));
    }
    let worst_th = max_abs(&th_res);
    if worst_th > tol.theta_on_tq {
        return Err(hypothesis(
            "lee-forms-equal-on-tq",
            format!("max tangent contraction difference {worst_th:.3e} > {:.3e}", tol.theta_on_tq),
        ));
    }
    report.push(CheckResult::from_residuals(
        "hypothesis-forms-equal-on-q",
        &eq_res,
        tol.forms_equal_on_q,
    ));
    report.push(CheckResult::from_residuals(
        "hypothesis-lee-forms-on-tq",
        &th_res,
        tol.theta_on_tq,
    ));

    let retraction = RetractionFamily::new(tube.clone());
    let mut patch_results = Vec::with_capacity(patches.len());
    let mut eta_closed_res = Vec::new();
    let mut sigma_q_res = Vec::new();
    let mut homotopy_res = Vec::new();
    let mut invariance_res = Vec::new();
    let mut q_fixed_res = Vec::new();
    let mut conclusion_res = Vec::new();
    let mut all_factors: Vec<f64> = Vec::new();
    let mut min_margin = f64::INFINITY;

    for dw_patch in patches {
        // Potentials with matched anchors: f0(q) = f1(q) = 0 at the anchor.
        let f0 = local_potential_anchored(theta0, &dw_patch.patch, &dw_patch.anchor, 0.0, tol.closed)?;
        let f1 = local_potential_anchored(theta1, &dw_patch.patch, &dw_patch.anchor, 0.0, tol.closed)?;
        let eta0 = omega0.exp_scale(&f0.f, -1.0)?;
        let eta1 = omega1.exp_scale(&f1.f, -1.0)?;
        let tau = eta1.sub(&eta0)?;
        let sigma = homotopy_sigma(&tau, &retraction, QuadSpec::homotopy())?;

        let deta0 = eta0.d();
        let deta1 = eta1.d();
        let dsigma = sigma.d();
        for p in &dw_patch.patch.samples {
            eta_closed_res.push(deta0.value(p)?.max_abs());
            eta_closed_res.push(deta1.value(p)?.max_abs());
            let hres = dsigma.value(p)?.sub(&tau.value(p)?).max_abs();
            homotopy_res.push(hres);
        }
        for q in &dw_patch.q_samples {
            sigma_q_res.push(sigma.value(q)?.max_abs());
        }

        let mut system = MoserSystem::new(eta0, eta1, sigma.clone())?;
        system.degeneracy_threshold = tol.degeneracy_threshold;
        let flow = system.flow(&dw_patch.patch.samples, *steps)?;
        invariance_res.extend(flow.invariance_residuals(&system)?);
        min_margin = min_margin.min(flow.min_margin());

        // Q is fixed pointwise.
        let q_flow = system.flow(&dw_patch.q_samples, *steps)?;
        for rec in &q_flow.records {
            let d: f64 = rec
                .seed
                .iter()
                .zip(&rec.image)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            q_fixed_res.push(d);
        }

        // Conformal conclusion at the seeds.
        let mut factor_samples = Vec::with_capacity(flow.records.len());
        for rec in &flow.records {
            let g = f0.f.value(&rec.seed)?.coeffs[0] - f1.f.value(&rec.image)?.coeffs[0];
            let w1 = omega1.value(&rec.image)?;
            let pulled = pullback_value(&w1, &rec.jacobian, n).scale(g.exp());
            let w0 = omega0.value(&rec.seed)?;
            conclusion_res.push(w0.sub(&pulled).max_abs());
            factor_samples.push(g);
            all_factors.push(g);
        }
        patch_results.push(DwPatchResult {
            f0,
            f1,
            sigma,
            system,
            flow,
            factor_samples,
        });
    }

    report.push(CheckResult::from_residuals(
        "eta-closed",
        &eta_closed_res,
        tol.closed,
    ));
    report.push(CheckResult::from_residuals(
        "sigma-on-q",
        &sigma_q_res,
        tol.sigma_on_q,
    ));
    report.push(CheckResult::from_residuals(
        "homotopy-formula",
        &homotopy_res,
        tol.homotopy,
    ));
    report.push(CheckResult::from_residuals(
        "moser-invariance",
        &invariance_res,
        tol.invariance,
    ));
    report.push(CheckResult::from_residuals(
        "q-fixed",
        &q_fixed_res,
        tol.q_fixed,
    ));
    report.push(CheckResult::from_residuals(
        "conformal-conclusion",
        &conclusion_res,
        tol.conclusion,
    ));
    report.metric("min_degeneracy_margin", min_margin);
    report.metric(
        "max_conformal_factor",
        all_factors.iter().map(|g| g.abs()).fold(0.0, f64::max),
    );
    Ok(DwResult {
        patches: patch_results,
        report,
    })
}

// ---------------------------------------------------------------------------
// Gluing
// ---------------------------------------------------------------------------

/// An overlap between two patches of a [`DwResult`], with shared samples.
#[derive(Debug, Clone)]
pub struct OverlapSpec {
    pub a: usize,
    pub b: usize,
    pub samples: Vec<Vec<f64>>,
}

/// Tolerances for [`gluing_check`].
#[derive(Debug, Clone, Copy)]
pub struct GluingTolerances {
    pub field_agreement: f64,
    pub map_agreement: f64,
    pub factor_agreement: f64,
    pub cocycle: f64,
}

impl Default for GluingTolerances {
    fn default() -> Self {
        GluingTolerances {
            field_agreement: 1e-6,
            map_agreement: 1e-6,
            factor_agreement: 1e-6,
            cocycle: 1e-6,
        }
    }
}

/// Cross-patch consistency on overlaps: the Moser fields, flows and
/// conformal factors agree, and the homotopy one-forms differ by the
/// cocycle factor `sigma_a = e^{-c_ab} sigma_b` with
/// `c_ab = f0_a - f0_b` constant (equal to the `f1` cocycle constant).
pub fn gluing_check(
    result: &DwResult,
    overlaps: &[OverlapSpec],
    steps: usize,
    tol: &GluingTolerances,
) -> Result<VerificationReport> {
    let mut report = VerificationReport::new("", "gluing", 0, 0);
    if overlaps.is_empty() {
        report.push(CheckResult::boolean("gluing-vacuous", true));
        return Ok(report);
    }
    let mut field_res = Vec::new();
    let mut map_res = Vec::new();
    let mut factor_res = Vec::new();
    let mut sigma_res = Vec::new();
    let mut cocycle_res = Vec::new();
    for (k, ov) in overlaps.iter().enumerate() {
        if ov.samples.is_empty() {
            return Err(GeomError::EmptyOverlap);
        }
        let pa = &result.patches[ov.a];
        let pb = &result.patches[ov.b];

        // Cocycle constants from both potential families.
        let ca = crate::lcs::transition_constant(&pa.f0, &pb.f0, &ov.samples, tol.cocycle)?;
        let cb = crate::lcs::transition_constant(&pa.f1, &pb.f1, &ov.samples, tol.cocycle)?;
        cocycle_res.push(ca.deviation);
        cocycle_res.push(cb.deviation);
        cocycle_res.push((ca.c - cb.c).abs());
        // Indexed by overlap: two patches may meet in several components
        // with distinct constants.
        report.metric(&format!("c_{}_{}_{}", ov.a, ov.b, k), ca.c);

        for p in &ov.samples {
            for &t in &[0.0, 0.25, 0.5, 0.75, 1.0] {
                let (ya, _, _) = pa.system.field(t, p)?;
                let (yb, _, _) = pb.system.field(t, p)?;
                let d = ya
                    .iter()
                    .zip(&yb)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                field_res.push(d);
            }
            // sigma_a = e^{-c} sigma_b
            let sa = pa.sigma.value(p)?;
            let sb = pb.sigma.value(p)?.scale((-ca.c).exp());
            sigma_res.push(sa.sub(&sb).max_abs());
        }

        let fa = pa.system.flow(&ov.samples, steps)?;
        let fb = pb.system.flow(&ov.samples, steps)?;
        for (ra, rb) in fa.records.iter().zip(&fb.records) {
            let d = ra
                .image
                .iter()
                .zip(&rb.image)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            map_res.push(d);
            let ga = pa.f0.f.value(&ra.seed)?.coeffs[0] - pa.f1.f.value(&ra.image)?.coeffs[0];
            let gb = pb.f0.f.value(&rb.seed)?.coeffs[0] - pb.f1.f.value(&rb.image)?.coeffs[0];
            factor_res.push((ga - gb).abs());
        }
    }
    report.push(CheckResult::from_residuals(
        "gluing-field-agreement",
        &field_res,
        tol.field_agreement,
    ));
    report.push(CheckResult::from_residuals(
        "gluing-map-agreement",
        &map_res,
        tol.map_agreement,
    ));
    report.push(CheckResult::from_residuals(
        "gluing-factor-agreement",
        &factor_res,
        tol.factor_agreement,
    ));
    report.push(CheckResult::from_residuals(
        "gluing-sigma-cocycle",
        &sigma_res,
        tol.cocycle,
    ));
    report.push(CheckResult::from_residuals(
        "gluing-cocycle-constant",
        &cocycle_res,
        tol.cocycle,
    ));
    Ok(report)
}

/// A smooth map wrapper around a flow: interpolating is not needed, the
/// time-1 map is queried by reintegration from the given point.
pub struct FlowMap {
    pub system: MoserSystem,
    pub steps: usize,
}

impl Debug for FlowMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FlowMap(steps={})", self.steps)
    }
}

impl FlowMap {
    /// The time-1 flow as a black-box [`SmoothMap`] with its transported
    /// Jacobian as the declared derivative.
    pub fn as_smooth_map(system: MoserSystem, steps: usize) -> SmoothMap {
        let n = system.eta0.n();
        let sys = Arc::new(FlowMap { system, steps });
        let s1 = sys.clone();
        let s2 = sys;
        SmoothMap::black_box(
            n,
            n,
            Arc::new(move |p: &[f64]| {
                let flow = s1.system.flow(&[p.to_vec()], s1.steps)?;
                Ok(flow.records[0].image.clone())
            }),
            Some(Arc::new(move |p: &[f64]| {
                let flow = s2.system.flow(&[p.to_vec()], s2.steps)?;
                Ok(flow.records[0].jacobian.clone())
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::forms::KFormValue;
    use crate::tube::SubmanifoldModel;
    use approx::assert_relative_eq;

    fn origin_tube(n: usize, eps: f64) -> TubularModel {
        let zeros = vec![parse("0", 1).unwrap(); n];
        let sub = Arc::new(
            SubmanifoldModel::new(n, zeros, vec![], vec![], vec![], None).unwrap(),
        );
        TubularModel::new(sub, eps).unwrap()
    }

    #[test]
    fn moser_solve_hand_example() {
        // eta standard on the plane, sigma = dx1 -> Y = (0, 1).
        let eta = KFormValue::from_coeffs(2, 2, vec![1.0]).unwrap();
        let sigma = KFormValue::from_coeffs(2, 1, vec![1.0, 0.0]).unwrap();
        let y = moser_field_value(&eta, &sigma).unwrap();
        assert_relative_eq!(y.components[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(y.components[1], 1.0, epsilon = 1e-14);
        // and i_Y eta = -sigma
        let c = eta.interior(&y).unwrap();
        assert_relative_eq!(c.coeffs[0], -sigma.coeffs[0], epsilon = 1e-14);
        assert_relative_eq!(c.coeffs[1], -sigma.coeffs[1], epsilon = 1e-14);
    }

    #[test]
    fn moser_solve_zero_sigma() {
        let eta = KFormValue::from_coeffs(4, 2, vec![0.3, 1.0, -0.2, 0.4, 1.1, -0.6]).unwrap();
        let sigma = KFormValue::zero(4, 1);
        let y = moser_field_value(&eta, &sigma).unwrap();
        assert!(y.components.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn moser_solve_random_residual() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = 4;
            let coeffs: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let eta = KFormValue::from_coeffs(n, 2, coeffs).unwrap();
            if !nondegeneracy(&eta, 1e-6).unwrap().nondegenerate {
                continue;
            }
            let sig: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sigma = KFormValue::from_coeffs(n, 1, sig).unwrap();
            moser_field_value(&eta, &sigma).unwrap();
        }
    }

    #[test]
    fn sigma_radial_oracle_at_origin() {
        // Q = {0} in the plane, tau = dx1^dx2:
        // sigma = (x1 dx2 - x2 dx1) / 2, and d sigma = tau.
        let tube = origin_tube(2, 2.0);
        let r = RetractionFamily::new(tube);
        let tau = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let sigma = homotopy_sigma(&tau, &r, QuadSpec::homotopy()).unwrap();
        for p in [[0.4, -0.3], [1.0, 0.8], [-0.5, -0.1]] {
            let v = sigma.value(&p).unwrap();
            assert_relative_eq!(v.coeffs[0], -p[1] / 2.0, epsilon = 1e-10);
            assert_relative_eq!(v.coeffs[1], p[0] / 2.0, epsilon = 1e-10);
            let ds = sigma.d().value(&p).unwrap();
            assert_relative_eq!(ds.coeffs[0], 1.0, epsilon = 1e-7);
        }
        // sigma vanishes at the core
        assert!(sigma.value(&[0.0, 0.0]).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sigma_zero_tau() {
        let tube = origin_tube(2, 2.0);
        let r = RetractionFamily::new(tube);
        let tau = KFormField::zero(2, 2);
        let sigma = homotopy_sigma(&tau, &r, QuadSpec::homotopy()).unwrap();
        assert!(sigma.value(&[0.7, -0.2]).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn sigma_nonconstant_tau_dsigma_matches() {
        // tau = (1 + x1) dx1 ^ dx2 is closed; d sigma must reproduce it.
        let tube = origin_tube(2, 2.0);
        let r = RetractionFamily::new(tube);
        let tau =
            KFormField::from_exprs(2, 2, &[(vec![1, 2], parse("1 + x1", 2).unwrap())]).unwrap();
        let sigma = homotopy_sigma(&tau, &r, QuadSpec::homotopy()).unwrap();
        for p in [[0.3, 0.5], [-0.6, 0.2]] {
            let ds = sigma.d().value(&p).unwrap();
            let tv = tau.value(&p).unwrap();
            assert_relative_eq!(ds.coeffs[0], tv.coeffs[0], epsilon = 1e-7);
        }
    }

    #[test]
    fn flow_identity_when_sigma_zero() {
        let eta = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let sigma = KFormField::zero(2, 1);
        let system = MoserSystem::new(eta.clone(), eta, sigma).unwrap();
        let flow = system.flow(&[vec![0.3, -0.4]], 8).unwrap();
        assert_eq!(flow.records[0].image, vec![0.3, -0.4]);
        let jac = &flow.records[0].jacobian;
        assert_relative_eq!(jac[0], 1.0);
        assert_relative_eq!(jac[1], 0.0);
        assert_relative_eq!(jac[3], 1.0);
    }

    #[test]
    fn planar_moser_invariance() {
        // eta0 = dx^dy, eta1 = (1 + 0.3 x) dx^dy, Q = {0}.
        let tube = origin_tube(2, 2.0);
        let r = RetractionFamily::new(tube);
        let eta0 = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let eta1 = KFormField::from_exprs(
            2,
            2,
            &[(
                vec![1, 2],
                parse("1 + 0.8*sin(2*x1)*cos(2*x2) + 0.4*x1", 2).unwrap(),
            )],
        )
        .unwrap();
        let tau = eta1.sub(&eta0).unwrap();
        let sigma = homotopy_sigma(&tau, &r, QuadSpec::homotopy()).unwrap();
        let system = MoserSystem::new(eta0, eta1, sigma).unwrap();
        let seeds = vec![vec![0.4, 0.3], vec![-0.3, 0.5], vec![0.1, -0.6]];
        let flow = system.flow(&seeds, 200).unwrap();
        let res = flow.invariance_residuals(&system).unwrap();
        assert!(max_abs(&res) < 1e-4, "residuals {res:?}");
        // 4th-order convergence: halving the step cuts the residual >= 8x.
        let fine = system.flow(&seeds, 400).unwrap();
        let res_fine = fine.invariance_residuals(&system).unwrap();
        let ratio = max_abs(&res) / max_abs(&res_fine).max(1e-16);
        assert!(ratio >= 8.0, "ratio {ratio}");
    }

    #[test]
    fn darboux_trivial_case_is_identity() {
        let tube = origin_tube(2, 2.0);
        let omega = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let theta = KFormField::zero(2, 1);
        let samples = vec![vec![0.3, 0.2], vec![-0.4, 0.1]];
        let patch = StarPatch::new(
            vec![0.0, 0.0],
            Arc::new(|_: &[f64]| true),
            samples,
        )
        .unwrap();
        let input = DwInput {
            omega0: omega.clone(),
            omega1: omega.clone(),
            theta0: theta.clone(),
            theta1: theta,
            tube,
            patches: vec![DwPatch {
                patch,
                anchor: vec![0.0, 0.0],
                q_samples: vec![vec![0.0, 0.0]],
            }],
            steps: 8,
            tol: DwTolerances::default(),
        };
        let out = darboux_weinstein(&input).unwrap();
        assert!(out.report.pass, "{}", out.report.to_json());
        for rec in &out.patches[0].flow.records {
            for (a, b) in rec.seed.iter().zip(&rec.image) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
        assert!(out.report.metrics["max_conformal_factor"] < 1e-12);
    }

    #[test]
    fn darboux_rejects_unequal_forms_on_q() {
        let tube = origin_tube(2, 2.0);
        let omega0 = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let omega1 = KFormField::constant(2, 2, vec![2.0]).unwrap();
        let theta = KFormField::zero(2, 1);
        let patch = StarPatch::new(
            vec![0.0, 0.0],
            Arc::new(|_: &[f64]| true),
            vec![vec![0.1, 0.1]],
        )
        .unwrap();
        let input = DwInput {
            omega0,
            omega1,
            theta0: theta.clone(),
            theta1: theta,
            tube,
            patches: vec![DwPatch {
                patch,
                anchor: vec![0.0, 0.0],
                q_samples: vec![vec![0.0, 0.0]],
            }],
            steps: 8,
            tol: DwTolerances::default(),
        };
        match darboux_weinstein(&input) {
            Err(GeomError::Hypothesis { name, .. }) => assert_eq!(name, "forms-equal-on-q"),
            other => panic!("expected hypothesis failure, got {other:?}"),
        }
    }

    #[test]
    fn classical_darboux_planar_factor_vanishes() {
        // theta = 0: recovered conformal factor must vanish (classical case).
        let tube = origin_tube(2, 2.0);
        let omega0 = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let omega1 =
            KFormField::from_exprs(2, 2, &[(vec![1, 2], parse("1 + 0.3*x1", 2).unwrap())]).unwrap();
        let theta = KFormField::zero(2, 1);
        let samples = vec![vec![0.4, 0.3], vec![-0.2, -0.5], vec![0.6, -0.1]];
        let patch = StarPatch::new(vec![0.0, 0.0], Arc::new(|_: &[f64]| true), samples).unwrap();
        let input = DwInput {
            omega0,
            omega1,
            theta0: theta.clone(),
            theta1: theta,
            tube,
            patches: vec![DwPatch {
                patch,
                anchor: vec![0.0, 0.0],
                q_samples: vec![vec![0.0, 0.0]],
            }],
            steps: 200,
            tol: DwTolerances::default(),
        };
        let out = darboux_weinstein(&input).unwrap();
        assert!(out.report.pass, "{}", out.report.to_json());
        assert!(out.report.metrics["max_conformal_factor"] <= 1e-6);
    }

    #[test]
    fn gluing_single_patch_vacuous() {
        let tube = origin_tube(2, 2.0);
        let omega = KFormField::constant(2, 2, vec![1.0]).unwrap();
        let theta = KFormField::zero(2, 1);
        let patch = StarPatch::new(
            vec![0.0, 0.0],
            Arc::new(|_: &[f64]| true),
            vec![vec![0.1, 0.2]],
        )
        .unwrap();
        let input = DwInput {
            omega0: omega.clone(),
            omega1: omega,
            theta0: theta.clone(),
            theta1: theta,
            tube,
            patches: vec![DwPatch {
                patch,
                anchor: vec![0.0, 0.0],
                q_samples: vec![vec![0.0, 0.0]],
            }],
            steps: 8,
            tol: DwTolerances::default(),
        };
        let out = darboux_weinstein(&input).unwrap();
        let g = gluing_check(&out, &[], 8, &GluingTolerances::default()).unwrap();
        assert!(g.pass);
    }

    #[test]
    fn lie_derivative_against_flow_difference() {
        // L_X w at p vs (phi_h^* w - w)/h for the flow of constant X.
        let w =
            KFormField::from_exprs(2, 1, &[(vec![2], parse("sin(x1)", 2).unwrap())]).unwrap();
        let x = crate::forms::VectorField::constant(vec![1.0, 0.0]);
        let lw = w.lie(&x).unwrap();
        let p = [0.4, 0.7];
        let h = 1e-6;
        // flow of X is translation by h e1; pullback Jacobian = I
        let wp = w.value(&[p[0] + h, p[1]]).unwrap();
        let w0 = w.value(&p).unwrap();
        let fd = wp.sub(&w0).scale(1.0 / h);
        let lv = lw.value(&p).unwrap();
        for (a, b) in lv.coeffs.iter().zip(&fd.coeffs) {
            assert_relative_eq!(a, b, epsilon = 1e-5);
        }
    }
}

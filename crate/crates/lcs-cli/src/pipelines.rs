//! Pipeline drivers: build geometry from a validated scenario, run the
//! engine, and assemble one deterministic report plus optional plot rows.
//!
//! Configuration problems surface as `anyhow` errors (exit code 2);
//! engine failures are captured into the report as a named failing check
//! (exit code 1).

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lcs_geom::moser::{darboux_weinstein, gluing_check, homotopy_sigma, DwInput, DwResult};
use lcs_geom::quadrature::QuadSpec;
use lcs_geom::report::max_abs;
use lcs_geom::{
    check_lcs, d_theta, gcs_residual, hr_form, pullback_value, weinstein_lcs, CheckResult,
    CotangentTolerances, DwTolerances, GeomError, GluingTolerances, LcsStructure,
    LcsTolerances, MoserSystem, RetractionFamily, VerificationReport, WeinsteinInput,
    WeinsteinTolerances,
};

use crate::scenario::{Pipeline, Scenario};

/// Applied tolerance values by name: pipeline defaults, then scenario
/// overrides, then the global scale factor. Echoed in the report.
#[derive(Debug, Clone)]
pub struct TolSet {
    map: BTreeMap<String, f64>,
}

/// Default tolerance table per pipeline; scenario overrides must use
/// exactly these keys.
pub fn default_tolerances(pipeline: Pipeline) -> Vec<(&'static str, f64)> {
    let dw = [
        ("forms_equal_on_q", 1e-10),
        ("theta_on_tq", 1e-10),
        ("closed", 1e-8),
        ("sigma_on_q", 1e-9),
        ("homotopy", 1e-5),
        ("invariance", 1e-4),
        ("q_fixed", 1e-9),
        ("conclusion", 1e-4),
        ("degeneracy", 1e-10),
    ];
    match pipeline {
        Pipeline::CheckLcs => vec![("closed", 1e-8), ("lcs", 1e-8), ("degeneracy", 1e-10)],
        Pipeline::MoserFlow => vec![
            ("closed", 1e-8),
            ("sigma_on_q", 1e-9),
            ("homotopy", 1e-5),
            ("invariance", 1e-4),
            ("q_fixed", 1e-9),
            ("degeneracy", 1e-10),
        ],
        Pipeline::Darboux => {
            let mut v: Vec<_> = dw.to_vec();
            v.extend([
                ("field_agreement", 1e-6),
                ("map_agreement", 1e-6),
                ("factor_agreement", 1e-6),
                ("cocycle", 1e-6),
            ]);
            v
        }
        Pipeline::Cotangent => vec![
            ("closed", 1e-8),
            ("lcs", 1e-8),
            ("gcs", 1e-7),
            ("lagrangian", 1e-10),
            ("linearity", 1e-12),
            ("normalization", 1e-8),
        ],
        Pipeline::Weinstein => {
            let mut v: Vec<_> = dw.to_vec();
            v.extend([
                ("lcs", 1e-8),
                ("gcs", 1e-7),
                ("lagrangian", 1e-10),
                ("linearity", 1e-12),
                ("normalization", 1e-8),
                ("factor_on_q", 1e-6),
            ]);
            v
        }
    }
}

impl TolSet {
    /// Merges defaults, overrides and the scale; rejects unknown keys.
    pub fn build(scenario: &Scenario, scale: f64) -> Result<Self> {
        let defaults = default_tolerances(scenario.file.pipeline);
        let mut map: BTreeMap<String, f64> = defaults
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        for (key, value) in &scenario.file.tolerances {
            if !map.contains_key(key) {
                bail!(
                    "tolerances.{key}: unknown key for the {} pipeline (known: {})",
                    scenario.file.pipeline.name(),
                    defaults
                        .iter()
                        .map(|(k, _)| *k)
                        .collect::<Vec<_>>()
                        .join(", ")
                );
            }
            map.insert(key.clone(), *value);
        }
        for value in map.values_mut() {
            *value *= scale;
        }
        Ok(TolSet { map })
    }

    fn get(&self, key: &str) -> f64 {
        *self.map.get(key).expect("tolerance key present by construction")
    }

    pub fn map(&self) -> &BTreeMap<String, f64> {
        &self.map
    }

    fn lcs(&self) -> LcsTolerances {
        LcsTolerances {
            closed: self.get("closed"),
            lcs: self.get("lcs"),
            degeneracy_threshold: self.get("degeneracy"),
        }
    }

    fn dw(&self) -> DwTolerances {
        DwTolerances {
            forms_equal_on_q: self.get("forms_equal_on_q"),
            theta_on_tq: self.get("theta_on_tq"),
            closed: self.get("closed"),
            sigma_on_q: self.get("sigma_on_q"),
            homotopy: self.get("homotopy"),
            invariance: self.get("invariance"),
            q_fixed: self.get("q_fixed"),
            conclusion: self.get("conclusion"),
            degeneracy_threshold: self.get("degeneracy"),
        }
    }

    fn gluing(&self) -> GluingTolerances {
        GluingTolerances {
            field_agreement: self.get("field_agreement"),
            map_agreement: self.get("map_agreement"),
            factor_agreement: self.get("factor_agreement"),
            cocycle: self.get("cocycle"),
        }
    }

    fn cotangent(&self) -> CotangentTolerances {
        CotangentTolerances {
            closed: self.get("closed"),
            lcs: self.get("lcs"),
            gcs: self.get("gcs"),
            lagrangian: self.get("lagrangian"),
            linearity: self.get("linearity"),
            normalization: self.get("normalization"),
        }
    }

    fn weinstein(&self) -> WeinsteinTolerances {
        WeinsteinTolerances {
            cot: self.cotangent(),
            factor_on_q: self.get("factor_on_q"),
            conclusion: self.get("conclusion"),
        }
    }
}

/// One plot-data row: a seed point, its worst residual, and the recovered
/// conformal factor (zero for pipelines without one).
pub struct CsvRow {
    pub point: Vec<f64>,
    pub residual: f64,
    pub factor: f64,
}

/// Runs the scenario's pipeline. Engine errors become a report with one
/// named failing check; only configuration problems escape as `Err`.
pub fn run(
    scenario: &Scenario,
    tols: &TolSet,
    steps: usize,
    seed: u64,
) -> Result<(VerificationReport, Vec<CsvRow>)> {
    match scenario.file.pipeline {
        Pipeline::CheckLcs => run_check_lcs(scenario, tols, seed),
        Pipeline::MoserFlow => run_moser_flow(scenario, tols, steps, seed),
        Pipeline::Darboux => run_darboux(scenario, tols, steps, seed),
        Pipeline::Cotangent => run_cotangent(scenario, tols, seed),
        Pipeline::Weinstein => run_weinstein(scenario, tols, steps, seed),
    }
}

/// Maps an engine error to the check it invalidates, recursing through
/// stage attribution.
fn failure_check(err: &GeomError) -> CheckResult {
    match err {
        GeomError::NotClosed {
            name,
            residual,
            tolerance,
        } => CheckResult::single(name, *residual, *tolerance),
        GeomError::Hypothesis { name, detail } => {
            CheckResult::boolean(name, false).with_detail(detail.clone())
        }
        GeomError::Stage { stage, source } => {
            let inner = failure_check(source);
            let detail = format!("stage `{stage}`: {source}");
            inner.with_detail(detail)
        }
        other => CheckResult::boolean("pipeline-error", false).with_detail(other.to_string()),
    }
}

fn capture(
    scenario: &Scenario,
    seed: u64,
    out: lcs_geom::Result<(VerificationReport, Vec<CsvRow>)>,
) -> Result<(VerificationReport, Vec<CsvRow>)> {
    match out {
        Ok(x) => Ok(x),
        Err(err) => {
            let mut report = VerificationReport::new(
                &scenario.file.name,
                scenario.file.pipeline.name(),
                seed,
                0,
            );
            report.push(failure_check(&err));
            Ok((report, Vec::new()))
        }
    }
}

/// Fresh report carrying the scenario identity; checks and metrics of the
/// engine report are copied in so `pass` is re-derived from the checks.
fn adopt(
    scenario: &Scenario,
    seed: u64,
    samples: usize,
    engine: VerificationReport,
) -> VerificationReport {
    let mut report = VerificationReport::new(
        &scenario.file.name,
        scenario.file.pipeline.name(),
        seed,
        samples,
    );
    for check in engine.checks {
        report.push(check);
    }
    for (k, v) in engine.metrics {
        report.metric(&k, v);
    }
    report
}

// ---------------------------------------------------------------------
// check-lcs
// ---------------------------------------------------------------------

fn run_check_lcs(
    scenario: &Scenario,
    tols: &TolSet,
    seed: u64,
) -> Result<(VerificationReport, Vec<CsvRow>)> {
    let omega = scenario.form("omega", 2)?;
    let theta = scenario.form("theta", 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = scenario.domain_samples(&mut rng)?;
    let structure = LcsStructure::new(omega.clone(), theta.clone())
        .map_err(|err| anyhow!("forms: {err}"))?;
    capture(scenario, seed, (|| {
        let engine = check_lcs(&structure, &samples, &tols.lcs())?;
        let report = adopt(scenario, seed, samples.len(), engine);
        let residual_field = d_theta(&omega, &theta)?;
        let mut rows = Vec::with_capacity(samples.len());
        for p in &samples {
            rows.push(CsvRow {
                point: p.clone(),
                residual: residual_field.value(p)?.max_abs(),
                factor: 0.0,
            });
        }
        Ok((report, rows))
    })())
}

// ---------------------------------------------------------------------
// moser-flow
// ---------------------------------------------------------------------

fn run_moser_flow(
    scenario: &Scenario,
    tols: &TolSet,
    steps: usize,
    seed: u64,
) -> Result<(VerificationReport, Vec<CsvRow>)> {
    let eta0 = scenario.form("eta0", 2)?;
    let eta1 = scenario.form("eta1", 2)?;
    let tube = scenario.tube()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<Vec<f64>> = (0..scenario.file.samples)
        .map(|_| scenario.random_tube_point(&tube, &mut rng))
        .collect::<Result<_>>()?;
    let grid_per_dim = if tube.submanifold.param_dim <= 1 { 8 } else { 5 };
    let q_points: Vec<Vec<f64>> = tube
        .submanifold
        .chart_grid(grid_per_dim)
        .iter()
        .map(|u| tube.submanifold.embed(u))
        .collect::<lcs_geom::Result<_>>()
        .map_err(|err| anyhow!("submanifold: {err}"))?;

    capture(scenario, seed, (|| {
        let mut report = VerificationReport::new(
            &scenario.file.name,
            scenario.file.pipeline.name(),
            seed,
            seeds.len(),
        );
        let closed_tol = tols.get("closed");
        for (name, eta) in [("eta0-closed", &eta0), ("eta1-closed", &eta1)] {
            let d = eta.d();
            let res: Vec<f64> = seeds
                .iter()
                .map(|p| Ok(d.value(p)?.max_abs()))
                .collect::<lcs_geom::Result<_>>()?;
            report.push(CheckResult::from_residuals(name, &res, closed_tol));
        }
        let tau = eta1.sub(&eta0)?;
        let retraction = RetractionFamily::new(tube.clone());
        let sigma = homotopy_sigma(&tau, &retraction, QuadSpec::homotopy())?;
        let on_q: Vec<f64> = q_points
            .iter()
            .map(|q| Ok(sigma.value(q)?.max_abs()))
            .collect::<lcs_geom::Result<_>>()?;
        report.push(CheckResult::from_residuals(
            "sigma-on-q",
            &on_q,
            tols.get("sigma_on_q"),
        ));
        let dsigma = sigma.d().sub(&tau)?;
        let hom: Vec<f64> = seeds
            .iter()
            .map(|p| Ok(dsigma.value(p)?.max_abs()))
            .collect::<lcs_geom::Result<_>>()?;
        report.push(CheckResult::from_residuals(
            "homotopy-formula",
            &hom,
            tols.get("homotopy"),
        ));

        let system = MoserSystem {
            eta0: eta0.clone(),
            eta1: eta1.clone(),
            sigma,
            degeneracy_threshold: tols.get("degeneracy"),
        };
        let flow = system.flow(&seeds, steps)?;
        let inv = flow.invariance_residuals(&system)?;
        report.push(CheckResult::from_residuals(
            "moser-invariance",
            &inv,
            tols.get("invariance"),
        ));
        let q_flow = system.flow(&q_points, steps)?;
        let drift: Vec<f64> = q_flow
            .records
            .iter()
            .map(|r| {
                r.image
                    .iter()
                    .zip(&r.seed)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        report.push(CheckResult::from_residuals(
            "q-fixed",
            &drift,
            tols.get("q_fixed"),
        ));
        report.metric(
            "min_degeneracy_margin",
            flow.min_margin().min(q_flow.min_margin()),
        );
        report.metric("max_invariance_residual", max_abs(&inv));

        let per_cp = inv.len() / flow.records.len().max(1);
        let rows = flow
            .records
            .iter()
            .zip(inv.chunks(per_cp.max(1)))
            .map(|(rec, chunk)| CsvRow {
                point: rec.seed.clone(),
                residual: max_abs(chunk),
                factor: 0.0,
            })
            .collect();
        Ok((report, rows))
    })())
}

// ---------------------------------------------------------------------
// darboux
// ---------------------------------------------------------------------

/// Conclusion rows shared by the darboux and weinstein pipelines: per
/// seed, the rescaled-form invariance residual at t = 1 and the recovered
/// conformal factor.
fn conclusion_rows(result: &DwResult) -> lcs_geom::Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for patch in &result.patches {
        let n = patch.system.eta0.n();
        for (rec, g) in patch.flow.records.iter().zip(&patch.factor_samples) {
            let pulled = pullback_value(&patch.system.eta1.value(&rec.image)?, &rec.jacobian, n);
            let residual = patch.system.eta0.value(&rec.seed)?.sub(&pulled).max_abs();
            rows.push(CsvRow {
                point: rec.seed.clone(),
                residual,
                factor: *g,
            });
        }
    }
    Ok(rows)
}

fn run_darboux(
    scenario: &Scenario,
    tols: &TolSet,
    steps: usize,
    seed: u64,
) -> Result<(VerificationReport, Vec<CsvRow>)> {
    let omega0 = scenario.form("omega0", 2)?;
    let omega1 = scenario.form("omega1", 2)?;
    let theta0 = scenario.form("theta0", 1)?;
    let theta1 = scenario.form("theta1", 1)?;
    let tube = scenario.tube()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (patches, overlaps) = scenario.dw_patches(&tube, &mut rng)?;
    let samples = patches.iter().map(|p| p.patch.samples.len()).sum();

    let input = DwInput {
        omega0,
        omega1,
        theta0,
        theta1,
        tube,
        patches,
        steps,
        tol: tols.dw(),
    };
    capture(scenario, seed, (|| {
        let result = darboux_weinstein(&input)?;
        let mut report = adopt(scenario, seed, samples, result.report.clone());
        if !overlaps.is_empty() {
            let glue = gluing_check(&result, &overlaps, steps, &tols.gluing())?;
            for check in glue.checks {
                report.push(check);
            }
            for (k, v) in glue.metrics {
                report.metric(&k, v);
            }
        }
        let rows = conclusion_rows(&result)?;
        Ok((report, rows))
    })())
}

// ---------------------------------------------------------------------
// cotangent
// ---------------------------------------------------------------------

fn run_cotangent(
    scenario: &Scenario,
    tols: &TolSet,
    seed: u64,
) -> Result<(VerificationReport, Vec<CsvRow>)> {
    let (model, p_radius) = scenario.cotangent_model()?;
    let theta = scenario.form("theta", 1)?;
    let potential = if scenario.file.forms.contains_key("potential") {
        Some(scenario.form("potential", 0)?)
    } else {
        None
    };
    let ctol = tols.cotangent();
    capture(scenario, seed, (|| {
        let hr = hr_form(&model, &theta, &ctol)?;
        let samples = model.sample_points(scenario.file.samples, p_radius, seed);
        let engine = hr.verify(&samples, &ctol)?;
        let mut report = adopt(scenario, seed, samples.len(), engine);
        if let Some(f_base) = &potential {
            let res = gcs_residual(&hr, f_base, &samples)?;
            report.push(CheckResult::single("gcs-closed", res, ctol.gcs));
        }
        let residual_field = d_theta(&hr.omega_theta, &hr.lee)?;
        let mut rows = Vec::with_capacity(samples.len());
        for p in &samples {
            rows.push(CsvRow {
                point: p.clone(),
                residual: residual_field.value(p)?.max_abs(),
                factor: 0.0,
            });
        }
        Ok((report, rows))
    })())
}

// ---------------------------------------------------------------------
// weinstein
// ---------------------------------------------------------------------

fn run_weinstein(
    scenario: &Scenario,
    tols: &TolSet,
    steps: usize,
    seed: u64,
) -> Result<(VerificationReport, Vec<CsvRow>)> {
    let omega = scenario.form("omega", 2)?;
    let theta = scenario.form("theta", 1)?;
    let metric = scenario.metric()?;
    let tube = scenario.tube()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (patches, overlaps) = scenario.dw_patches(&tube, &mut rng)?;
    if !overlaps.is_empty() {
        bail!("overlaps: not supported by the weinstein pipeline");
    }
    let samples = patches.iter().map(|p| p.patch.samples.len()).sum();

    let input = WeinsteinInput {
        omega,
        theta,
        metric,
        tube,
        patches,
        steps,
        dw_tol: tols.dw(),
        tol: tols.weinstein(),
    };
    capture(scenario, seed, (|| {
        let result = weinstein_lcs(&input)?;
        let report = adopt(scenario, seed, samples, result.report.clone());
        let rows = conclusion_rows(&result.dw)?;
        Ok((report, rows))
    })())
}

/// Zero-pad-free CSV serialization; floats print with shortest
/// round-tripping decimals, so fixed seeds give byte-identical files.
pub fn write_csv(rows: &[CsvRow], dimension: usize, path: &std::path::Path) -> Result<()> {
    let mut text = String::new();
    for i in 1..=dimension {
        text.push_str(&format!("x{i},"));
    }
    text.push_str("residual_max,conformal_factor\n");
    for row in rows {
        for x in &row.point {
            text.push_str(&format!("{x},"));
        }
        text.push_str(&format!("{},{}\n", row.residual, row.factor));
    }
    std::fs::write(path, text)
        .map_err(|err| anyhow!("cannot write plot data {}: {err}", path.display()))
}

//! Scenario configuration: a TOML file describing forms, a submanifold,
//! patches and a pipeline, validated against the declared dimension at load
//! time so that every later failure is a numerical check, not a typo.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use lcs_geom::expr::{parse, Expr};
use lcs_geom::moser::{DwPatch, OverlapSpec};
use lcs_geom::{
    CotangentModel, KFormField, MetricField, StarPatch, SubmanifoldModel, TubularModel,
};

/// Pipelines a scenario can declare; each maps to one subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    CheckLcs,
    Darboux,
    MoserFlow,
    Cotangent,
    Weinstein,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::CheckLcs => "check-lcs",
            Pipeline::Darboux => "darboux",
            Pipeline::MoserFlow => "moser-flow",
            Pipeline::Cotangent => "cotangent",
            Pipeline::Weinstein => "weinstein",
        }
    }
}

/// One differential form: a degree and a table of coefficient expressions
/// keyed by comma-separated 1-based index tuples, e.g. `"1,3" = "exp(x1)"`.
/// Degree-0 fields use `value` instead of `coeffs`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormSpec {
    pub degree: usize,
    #[serde(default)]
    pub coeffs: BTreeMap<String, String>,
    pub value: Option<String>,
}

/// Metric as a full row-major entry table; omitted entries default to the
/// Euclidean metric.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub entries: Vec<String>,
}

/// Ambient sampling box for pipelines without a submanifold.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub box_min: Vec<f64>,
    pub box_max: Vec<f64>,
}

/// Embedded submanifold: chart expressions in `x1..xm`, a parameter box,
/// periodicity flags and the tube radius.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmanifoldSpec {
    pub parametrization: Vec<String>,
    #[serde(default)]
    pub box_min: Vec<f64>,
    #[serde(default)]
    pub box_max: Vec<f64>,
    #[serde(default)]
    pub periodic: Vec<bool>,
    pub normal_frame: Option<Vec<Vec<String>>>,
    pub epsilon: f64,
    /// Normal-offset radius for random tube samples; defaults to
    /// `0.8 * epsilon`. Smaller values keep flows well inside the tube.
    pub sample_radius: Option<f64>,
}

/// Cotangent local model `T^*Q` over a coordinate box on the base.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotangentSpec {
    pub base_dim: usize,
    pub box_min: Vec<f64>,
    pub box_max: Vec<f64>,
    #[serde(default)]
    pub periodic: Vec<bool>,
    #[serde(default = "default_p_radius")]
    pub p_radius: f64,
}

fn default_p_radius() -> f64 {
    0.8
}

/// Star-shaped patch of the tube cover.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub kind: PatchKind,
    pub basepoint: Vec<f64>,
    /// Anchor on Q for the conformal potentials; defaults to the basepoint.
    pub anchor: Option<Vec<f64>>,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchKind {
    /// The whole tube (star-shaped for box charts).
    All,
    /// Euclidean ball around the basepoint.
    Ball,
    /// The plane minus the closed ray from the origin opposite the
    /// basepoint; star-shaped about the basepoint.
    CutPlane,
}

/// Overlap sample request between two patches, optionally restricted to a
/// half-space to pick one connected component.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapFileSpec {
    pub a: usize,
    pub b: usize,
    #[serde(default = "default_overlap_count")]
    pub count: usize,
    pub halfspace_normal: Option<Vec<f64>>,
    #[serde(default)]
    pub halfspace_offset: f64,
}

fn default_overlap_count() -> usize {
    8
}

/// The raw deserialized scenario file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub dimension: usize,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub samples: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default)]
    pub forms: BTreeMap<String, FormSpec>,
    pub metric: Option<MetricSpec>,
    pub domain: Option<DomainSpec>,
    pub submanifold: Option<SubmanifoldSpec>,
    pub cotangent: Option<CotangentSpec>,
    #[serde(default)]
    pub patches: Vec<PatchSpec>,
    #[serde(default)]
    pub overlaps: Vec<OverlapFileSpec>,
}

fn default_steps() -> usize {
    200
}

/// A validated scenario.
#[derive(Debug)]
pub struct Scenario {
    pub file: ScenarioFile,
}

/// Loads and validates one scenario file. All expressions are parsed
/// against the dimension they will be evaluated in; errors name the field.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario file {}", path.display()))?;
    let file: ScenarioFile = toml::from_str(&text)
        .with_context(|| format!("cannot parse scenario file {}", path.display()))?;
    let scenario = Scenario { file };
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    fn validate(&self) -> Result<()> {
        let f = &self.file;
        let n = f.dimension;
        if n == 0 {
            bail!("dimension: must be positive");
        }
        if f.samples == 0 {
            bail!("samples: must be positive");
        }
        if f.steps == 0 || f.steps % 4 != 0 {
            bail!("steps: must be a positive multiple of 4");
        }
        for (key, value) in &f.tolerances {
            if !value.is_finite() || *value <= 0.0 {
                bail!("tolerances.{key}: must be a positive finite number");
            }
        }
        let form_dim = self.form_dimension();
        for (name, spec) in &f.forms {
            self.validate_form(name, spec, form_dim)?;
        }
        if let Some(m) = &f.metric {
            if m.entries.len() != n * n {
                bail!(
                    "metric.entries: expected {} entries for dimension {n}, got {}",
                    n * n,
                    m.entries.len()
                );
            }
            for (i, e) in m.entries.iter().enumerate() {
                parse(e, n).map_err(|err| anyhow!("metric.entries[{i}]: {err}"))?;
            }
        }
        if let Some(d) = &f.domain {
            if d.box_min.len() != n || d.box_max.len() != n {
                bail!("domain: box_min and box_max must have length {n}");
            }
            if d.box_min.iter().zip(&d.box_max).any(|(a, b)| a >= b) {
                bail!("domain: box_min must be strictly below box_max");
            }
        }
        if let Some(s) = &f.submanifold {
            self.validate_submanifold(s, n)?;
        }
        if let Some(c) = &f.cotangent {
            if 2 * c.base_dim != n {
                bail!(
                    "cotangent.base_dim: model dimension {} does not match dimension {n}",
                    2 * c.base_dim
                );
            }
            if c.box_min.len() != c.base_dim || c.box_max.len() != c.base_dim {
                bail!("cotangent: box_min and box_max must have length {}", c.base_dim);
            }
            if !c.periodic.is_empty() && c.periodic.len() != c.base_dim {
                bail!("cotangent.periodic: must have length {}", c.base_dim);
            }
            if c.p_radius <= 0.0 {
                bail!("cotangent.p_radius: must be positive");
            }
        }
        for (i, p) in f.patches.iter().enumerate() {
            if p.basepoint.len() != n {
                bail!("patches[{i}].basepoint: must have length {n}");
            }
            if let Some(a) = &p.anchor {
                if a.len() != n {
                    bail!("patches[{i}].anchor: must have length {n}");
                }
            }
            match p.kind {
                PatchKind::Ball => {
                    if !p.radius.map(|r| r > 0.0).unwrap_or(false) {
                        bail!("patches[{i}].radius: ball patches need a positive radius");
                    }
                }
                PatchKind::CutPlane => {
                    let norm: f64 = p.basepoint.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        bail!("patches[{i}].basepoint: cut-plane patches need a nonzero basepoint");
                    }
                }
                PatchKind::All => {}
            }
        }
        for (i, ov) in f.overlaps.iter().enumerate() {
            if ov.a >= f.patches.len() || ov.b >= f.patches.len() {
                bail!("overlaps[{i}]: patch index out of range");
            }
            if ov.count == 0 {
                bail!("overlaps[{i}].count: must be positive");
            }
            if let Some(h) = &ov.halfspace_normal {
                if h.len() != n {
                    bail!("overlaps[{i}].halfspace_normal: must have length {n}");
                }
            }
        }
        self.validate_pipeline_requirements()
    }

    /// Dimension the form expressions are evaluated in: the base for the
    /// cotangent pipeline, the ambient space otherwise.
    fn form_dimension(&self) -> usize {
        match self.file.pipeline {
            Pipeline::Cotangent => self
                .file
                .cotangent
                .as_ref()
                .map(|c| c.base_dim)
                .unwrap_or(self.file.dimension),
            _ => self.file.dimension,
        }
    }

    fn validate_form(&self, name: &str, spec: &FormSpec, n: usize) -> Result<()> {
        if spec.degree > n {
            bail!("forms.{name}.degree: {} exceeds dimension {n}", spec.degree);
        }
        if spec.degree == 0 {
            if spec.value.is_none() {
                bail!("forms.{name}.value: degree-0 fields need a value expression");
            }
            if !spec.coeffs.is_empty() {
                bail!("forms.{name}.coeffs: degree-0 fields use value, not coeffs");
            }
        } else if spec.value.is_some() {
            bail!("forms.{name}.value: only degree-0 fields take a value expression");
        }
        if let Some(v) = &spec.value {
            parse(v, n).map_err(|err| anyhow!("forms.{name}.value: {err}"))?;
        }
        for (key, text) in &spec.coeffs {
            let idx = parse_index_key(key, spec.degree, n)
                .map_err(|err| anyhow!("forms.{name}.coeffs[\"{key}\"]: {err}"))?;
            let _ = idx;
            parse(text, n).map_err(|err| anyhow!("forms.{name}.coeffs[\"{key}\"]: {err}"))?;
        }
        Ok(())
    }

    fn validate_submanifold(&self, s: &SubmanifoldSpec, n: usize) -> Result<()> {
        let m = s.box_min.len();
        if s.box_max.len() != m {
            bail!("submanifold: box_min and box_max must have equal length");
        }
        if !s.periodic.is_empty() && s.periodic.len() != m {
            bail!("submanifold.periodic: must have length {m}");
        }
        if s.parametrization.len() != n {
            bail!(
                "submanifold.parametrization: expected {n} components, got {}",
                s.parametrization.len()
            );
        }
        if m >= n {
            bail!("submanifold: parameter count {m} must be below dimension {n}");
        }
        for (i, e) in s.parametrization.iter().enumerate() {
            parse(e, m).map_err(|err| anyhow!("submanifold.parametrization[{i}]: {err}"))?;
        }
        if let Some(frame) = &s.normal_frame {
            if frame.len() != n - m {
                bail!("submanifold.normal_frame: expected {} vectors", n - m);
            }
            for (a, vec) in frame.iter().enumerate() {
                if vec.len() != n {
                    bail!("submanifold.normal_frame[{a}]: must have {n} components");
                }
                for (i, e) in vec.iter().enumerate() {
                    parse(e, m)
                        .map_err(|err| anyhow!("submanifold.normal_frame[{a}][{i}]: {err}"))?;
                }
            }
        }
        if s.epsilon <= 0.0 {
            bail!("submanifold.epsilon: must be positive");
        }
        if let Some(r) = s.sample_radius {
            if r <= 0.0 || r > s.epsilon {
                bail!("submanifold.sample_radius: must lie in (0, epsilon]");
            }
        }
        Ok(())
    }

    fn validate_pipeline_requirements(&self) -> Result<()> {
        let f = &self.file;
        match f.pipeline {
            Pipeline::CheckLcs => {
                self.require_form("omega", 2)?;
                if f.domain.is_none() {
                    bail!("domain: required for the check-lcs pipeline");
                }
            }
            Pipeline::MoserFlow => {
                self.require_form("eta0", 2)?;
                self.require_form("eta1", 2)?;
                if f.submanifold.is_none() {
                    bail!("submanifold: required for the moser-flow pipeline");
                }
            }
            Pipeline::Darboux => {
                self.require_form("omega0", 2)?;
                self.require_form("omega1", 2)?;
                if f.submanifold.is_none() {
                    bail!("submanifold: required for the darboux pipeline");
                }
                if f.patches.is_empty() {
                    bail!("patches: the darboux pipeline needs at least one patch");
                }
            }
            Pipeline::Cotangent => {
                if f.cotangent.is_none() {
                    bail!("cotangent: required for the cotangent pipeline");
                }
            }
            Pipeline::Weinstein => {
                self.require_form("omega", 2)?;
                if f.submanifold.is_none() {
                    bail!("submanifold: required for the weinstein pipeline");
                }
                if f.patches.is_empty() {
                    bail!("patches: the weinstein pipeline needs at least one patch");
                }
            }
        }
        Ok(())
    }

    fn require_form(&self, name: &str, degree: usize) -> Result<()> {
        match self.file.forms.get(name) {
            Some(spec) if spec.degree == degree => Ok(()),
            Some(spec) => bail!(
                "forms.{name}.degree: expected {degree}, got {}",
                spec.degree
            ),
            None => bail!("forms.{name}: required for the {} pipeline", self.file.pipeline.name()),
        }
    }

    // -----------------------------------------------------------------
    // Builders
    // -----------------------------------------------------------------

    /// Builds a declared form; absent optional forms fall back to zero.
    pub fn form(&self, name: &str, degree: usize) -> Result<KFormField> {
        let n = self.form_dimension();
        let Some(spec) = self.file.forms.get(name) else {
            return Ok(KFormField::zero(n, degree));
        };
        if spec.degree != degree {
            bail!("forms.{name}.degree: expected {degree}, got {}", spec.degree);
        }
        if degree == 0 {
            let text = spec.value.as_ref().expect("validated degree-0 value");
            let e = parse(text, n).map_err(|err| anyhow!("forms.{name}.value: {err}"))?;
            return Ok(KFormField::scalar_from_expr(n, e));
        }
        let mut entries: Vec<(Vec<usize>, Expr)> = Vec::new();
        for (key, text) in &spec.coeffs {
            let idx = parse_index_key(key, degree, n)
                .map_err(|err| anyhow!("forms.{name}.coeffs[\"{key}\"]: {err}"))?;
            let e = parse(text, n).map_err(|err| anyhow!("forms.{name}.coeffs[\"{key}\"]: {err}"))?;
            entries.push((idx, e));
        }
        KFormField::from_exprs(n, degree, &entries).map_err(|err| anyhow!("forms.{name}: {err}"))
    }

    pub fn metric(&self) -> Result<MetricField> {
        let n = self.file.dimension;
        match &self.file.metric {
            None => Ok(MetricField::euclidean(n)),
            Some(spec) => {
                let mut entries = Vec::with_capacity(n * n);
                for (i, text) in spec.entries.iter().enumerate() {
                    entries
                        .push(parse(text, n).map_err(|err| anyhow!("metric.entries[{i}]: {err}"))?);
                }
                MetricField::from_exprs(n, entries).map_err(|err| anyhow!("metric: {err}"))
            }
        }
    }

    pub fn tube(&self) -> Result<TubularModel> {
        let spec = self
            .file
            .submanifold
            .as_ref()
            .ok_or_else(|| anyhow!("submanifold: required for this pipeline"))?;
        let n = self.file.dimension;
        let m = spec.box_min.len();
        let parametrization: Vec<Expr> = spec
            .parametrization
            .iter()
            .map(|e| parse(e, m).expect("validated parametrization"))
            .collect();
        let periodic = if spec.periodic.is_empty() {
            vec![false; m]
        } else {
            spec.periodic.clone()
        };
        let frame = spec.normal_frame.as_ref().map(|rows| {
            rows.iter()
                .map(|vec| {
                    vec.iter()
                        .map(|e| parse(e, m).expect("validated normal frame"))
                        .collect()
                })
                .collect()
        });
        let sub = SubmanifoldModel::new(
            n,
            parametrization,
            spec.box_min.clone(),
            spec.box_max.clone(),
            periodic,
            frame,
        )
        .map_err(|err| anyhow!("submanifold: {err}"))?;
        TubularModel::new(Arc::new(sub), spec.epsilon).map_err(|err| anyhow!("submanifold: {err}"))
    }

    pub fn cotangent_model(&self) -> Result<(CotangentModel, f64)> {
        let spec = self
            .file
            .cotangent
            .as_ref()
            .ok_or_else(|| anyhow!("cotangent: required for this pipeline"))?;
        let periodic = if spec.periodic.is_empty() {
            vec![false; spec.base_dim]
        } else {
            spec.periodic.clone()
        };
        let model = CotangentModel::new(
            spec.base_dim,
            spec.box_min.clone(),
            spec.box_max.clone(),
            periodic,
        )
        .map_err(|err| anyhow!("cotangent: {err}"))?;
        Ok((model, spec.p_radius))
    }

    /// Uniform samples in the declared ambient domain box.
    pub fn domain_samples(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let d = self
            .file
            .domain
            .as_ref()
            .ok_or_else(|| anyhow!("domain: required for this pipeline"))?;
        Ok((0..self.file.samples)
            .map(|_| {
                d.box_min
                    .iter()
                    .zip(&d.box_max)
                    .map(|(lo, hi)| rng.gen_range(*lo..*hi))
                    .collect()
            })
            .collect())
    }

    /// Random tube points: a uniform chart point and a normal offset drawn
    /// from the ball of radius `0.8 epsilon`.
    pub fn random_tube_point(&self, tube: &TubularModel, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let sub = &tube.submanifold;
        let m = sub.param_dim;
        let codim = sub.ambient_dim - m;
        let u: Vec<f64> = (0..m)
            .map(|a| rng.gen_range(sub.box_min[a]..sub.box_max[a]))
            .collect();
        let r = self
            .file
            .submanifold
            .as_ref()
            .and_then(|s| s.sample_radius)
            .unwrap_or(0.8 * tube.epsilon);
        let coeffs = loop {
            let c: Vec<f64> = (0..codim).map(|_| rng.gen_range(-r..r)).collect();
            if c.iter().map(|x| x * x).sum::<f64>() <= r * r {
                break c;
            }
        };
        tube.point_from(&u, &coeffs).map_err(|err| anyhow!("submanifold: {err}"))
    }

    /// Builds the patch cover with flow seeds, anchors and Q samples, plus
    /// the overlap sample sets. One RNG stream, filled in declaration
    /// order, so reports are deterministic.
    pub fn dw_patches(
        &self,
        tube: &TubularModel,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<DwPatch>, Vec<OverlapSpec>)> {
        let f = &self.file;
        let predicates: Vec<Arc<dyn Fn(&[f64]) -> bool + Send + Sync>> =
            f.patches.iter().map(patch_predicate).collect();
        let per_patch = f.samples;
        let mut buckets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); f.patches.len()];
        let budget = 400 * per_patch.max(1) * f.patches.len().max(1);
        let mut draws = 0usize;
        while buckets.iter().any(|b| b.len() < per_patch) {
            if draws >= budget {
                bail!("patches: could not draw {per_patch} tube samples per patch; a patch may barely intersect the tube");
            }
            draws += 1;
            let p = self.random_tube_point(tube, rng)?;
            for (bucket, pred) in buckets.iter_mut().zip(&predicates) {
                if bucket.len() < per_patch && pred(&p) {
                    bucket.push(p.clone());
                }
            }
        }

        let grid_per_dim = match tube.submanifold.param_dim {
            0 | 1 => 8,
            _ => 3,
        };
        let q_grid: Vec<Vec<f64>> = tube
            .submanifold
            .chart_grid(grid_per_dim)
            .iter()
            .map(|u| tube.submanifold.embed(u))
            .collect::<lcs_geom::Result<_>>()
            .map_err(|err| anyhow!("submanifold: {err}"))?;

        let mut patches = Vec::with_capacity(f.patches.len());
        for (i, (spec, pred)) in f.patches.iter().zip(&predicates).enumerate() {
            let q_samples: Vec<Vec<f64>> = q_grid.iter().filter(|q| pred(q)).cloned().collect();
            if q_samples.is_empty() {
                bail!("patches[{i}]: no Q grid point lies in the patch");
            }
            let anchor = spec.anchor.clone().unwrap_or_else(|| spec.basepoint.clone());
            if !pred(&anchor) {
                bail!("patches[{i}].anchor: not inside the patch");
            }
            let star = StarPatch::new(
                spec.basepoint.clone(),
                pred.clone(),
                std::mem::take(&mut buckets[i]),
            )
            .map_err(|err| anyhow!("patches[{i}]: {err}"))?;
            patches.push(DwPatch {
                patch: star,
                anchor,
                q_samples,
            });
        }

        let mut overlaps = Vec::with_capacity(f.overlaps.len());
        for (i, ov) in f.overlaps.iter().enumerate() {
            let accept = |p: &[f64]| {
                predicates[ov.a](p)
                    && predicates[ov.b](p)
                    && ov.halfspace_normal.as_ref().map_or(true, |normal| {
                        normal.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() > ov.halfspace_offset
                    })
            };
            let mut samples = Vec::with_capacity(ov.count);
            let budget = 4000 * ov.count;
            let mut draws = 0usize;
            while samples.len() < ov.count {
                if draws >= budget {
                    bail!("overlaps[{i}]: could not draw {} samples in the overlap", ov.count);
                }
                draws += 1;
                let p = self.random_tube_point(tube, rng)?;
                if accept(&p) {
                    samples.push(p);
                }
            }
            overlaps.push(OverlapSpec {
                a: ov.a,
                b: ov.b,
                samples,
            });
        }
        Ok((patches, overlaps))
    }
}

/// Membership predicate of a patch spec.
fn patch_predicate(spec: &PatchSpec) -> Arc<dyn Fn(&[f64]) -> bool + Send + Sync> {
    match spec.kind {
        PatchKind::All => Arc::new(|_: &[f64]| true),
        PatchKind::Ball => {
            let c = spec.basepoint.clone();
            let r2 = spec.radius.expect("validated ball radius").powi(2);
            Arc::new(move |p: &[f64]| {
                p.iter().zip(&c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() <= r2
            })
        }
        PatchKind::CutPlane => {
            let b = spec.basepoint.clone();
            let b2: f64 = b.iter().map(|x| x * x).sum();
            // Excluded set: the ray from the origin in direction -b, i.e.
            // points behind the origin lying on the line through b.
            Arc::new(move |p: &[f64]| {
                let along: f64 = p.iter().zip(&b).map(|(x, y)| x * y).sum();
                if along >= 0.0 {
                    return true;
                }
                let perp2: f64 = p
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| x - along / b2 * y)
                    .map(|x| x * x)
                    .sum();
                perp2 > 1e-24
            })
        }
    }
}

/// Parses a coefficient key like `"1,3"` into a strictly increasing
/// 1-based multi-index of length `degree`.
fn parse_index_key(key: &str, degree: usize, n: usize) -> Result<Vec<usize>> {
    let parts: Vec<&str> = key.split(',').map(str::trim).collect();
    if parts.len() != degree {
        bail!("expected {degree} indices, got {}", parts.len());
    }
    let mut idx = Vec::with_capacity(degree);
    for part in parts {
        let i: usize = part
            .parse()
            .map_err(|_| anyhow!("index `{part}` is not a positive integer"))?;
        if i == 0 || i > n {
            bail!("index {i} out of range 1..={n}");
        }
        if let Some(last) = idx.last() {
            if i <= *last {
                bail!("indices must be strictly increasing");
            }
        }
        idx.push(i);
    }
    Ok(idx)
}

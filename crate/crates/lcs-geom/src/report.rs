//! Structured verification reports.
//!
//! Reports are plain data with deterministic serialization: map keys are
//! ordered and no timing or host information is included, so repeated runs
//! with the same seed produce byte-identical output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::num::{mean, pairwise_sum};

/// Outcome of one named check against a pinned tolerance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckResult {
    pub fn from_residuals(name: &str, residuals: &[f64], tolerance: f64) -> Self {
        let max = residuals.iter().copied().fold(0.0, f64::max);
        let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
        CheckResult {
            name: name.to_string(),
            max_residual: max,
            mean_residual: mean(&abs),
            tolerance,
            pass: max <= tolerance,
            detail: None,
        }
    }

    /// A check carrying a single residual value.
    pub fn single(name: &str, residual: f64, tolerance: f64) -> Self {
        Self::from_residuals(name, &[residual], tolerance)
    }

    /// A boolean check without a meaningful residual scale.
    pub fn boolean(name: &str, pass: bool) -> Self {
        CheckResult {
            name: name.to_string(),
            max_residual: if pass { 0.0 } else { 1.0 },
            mean_residual: if pass { 0.0 } else { 1.0 },
            tolerance: 0.0,
            pass,
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// Full report for one pipeline run over one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub scenario: String,
    pub pipeline: String,
    pub seed: u64,
    pub samples: usize,
    pub checks: Vec<CheckResult>,
    /// Named scalar diagnostics (condition numbers, margins, constants).
    pub metrics: BTreeMap<String, f64>,
    pub pass: bool,
}

impl VerificationReport {
    pub fn new(scenario: &str, pipeline: &str, seed: u64, samples: usize) -> Self {
        VerificationReport {
            scenario: scenario.to_string(),
            pipeline: pipeline.to_string(),
            seed,
            samples,
            checks: Vec::new(),
            metrics: BTreeMap::new(),
            pass: true,
        }
    }

    pub fn push(&mut self, check: CheckResult) {
        self.pass = self.pass && check.pass;
        self.checks.push(check);
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Max-norm of a residual list, for aggregate metrics.
pub fn max_abs(residuals: &[f64]) -> f64 {
    residuals.iter().map(|r| r.abs()).fold(0.0, f64::max)
}

/// Root mean square, reduced pairwise for run-to-run stability.
pub fn rms(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let sq: Vec<f64> = residuals.iter().map(|r| r * r).collect();
    (pairwise_sum(&sq) / sq.len() as f64).sqrt()
}

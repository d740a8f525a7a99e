use thiserror::Error;

use crate::expr::EvalError;

/// Errors produced by geometric evaluation and the pipeline drivers.
#[derive(Debug, Error)]
pub enum GeomError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degree mismatch in {context}: expected {expected}, got {got}")]
    DegreeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("singular linear system in {context} (pivot {pivot:.3e})")]
    SingularMatrix { context: &'static str, pivot: f64 },

    #[error("quadrature did not converge in {context}: relative change {change:.3e} after {panels} panels")]
    QuadratureNoConvergence {
        context: &'static str,
        change: f64,
        panels: usize,
    },

    #[error("projection onto the submanifold failed at {point:?}: residual {residual:.3e}")]
    ProjectionFailed { point: Vec<f64>, residual: f64 },

    #[error("point {point:?} lies outside the tube (|v| = {norm:.3e}, epsilon = {epsilon:.3e})")]
    OutsideTube {
        point: Vec<f64>,
        norm: f64,
        epsilon: f64,
    },

    #[error("derivative order {order} not supported for this field")]
    DerivativeOrder { order: usize },

    #[error("{name}: 1-form is not closed (residual {residual:.3e} > {tolerance:.3e})")]
    NotClosed {
        name: &'static str,
        residual: f64,
        tolerance: f64,
    },

    #[error("form {context} degenerate at {point:?} (margin {margin:.3e} below {threshold:.3e})")]
    Degenerate {
        context: &'static str,
        point: Vec<f64>,
        margin: f64,
        threshold: f64,
    },

    #[error("hypothesis check `{name}` failed: {detail}")]
    Hypothesis { name: String, detail: String },

    #[error("empty overlap sample set")]
    EmptyOverlap,

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<GeomError>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, GeomError>;

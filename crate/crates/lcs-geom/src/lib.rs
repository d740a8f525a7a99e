//! Numerical toolkit for locally conformally symplectic geometry on
//! coordinate patches: exterior calculus with forward-mode derivatives,
//! LCS structure checks, Moser-type flows and cotangent local models.

pub mod cotangent;
pub mod error;
pub mod expr;
pub mod forms;
pub mod lcs;
pub mod moser;
pub mod multiindex;
pub mod num;
pub mod quadrature;
pub mod report;
pub mod tube;

pub use cotangent::{
    gcs_residual, hr_form, identify_normal_cotangent, lagrangian_linear_normalization, liouville,
    transport_form, weinstein_lcs, zero_section_lagrangian, CotangentModel, CotangentTolerances,
    HallerRybickiForm, IdentSample, LagrangianIdentification, Normalization, TransportedForm,
    WeinsteinInput, WeinsteinResult, WeinsteinTolerances,
};
pub use error::{GeomError, Result};
pub use forms::{
    nondegeneracy, pullback_value, KFormField, KFormValue, MetricField, Nondegeneracy, Point,
    SmoothMap, VectorField, VectorFieldValue,
};
pub use lcs::{
    ball_patch, check_lcs, conformal_equivalence, conformal_rescale, d_theta, local_potential,
    local_potential_anchored, transition_constant, ConformalFactor, LcsStructure, LcsTolerances,
    StarPatch,
};
pub use moser::{
    darboux_weinstein, gluing_check, homotopy_sigma, moser_field_value, DwInput, DwPatch,
    DwResult, DwTolerances, GluingTolerances, MoserFlowResult, MoserSystem, OverlapSpec,
};
pub use report::{CheckResult, VerificationReport};
pub use tube::{RetractionFamily, SubmanifoldModel, TubeCoords, TubularModel};

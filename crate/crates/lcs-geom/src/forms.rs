//! Pointwise exterior algebra and differential-form fields on coordinate
//! patches.
//!
//! A [`KFormField`] is a small expression tree over coefficient sources
//! (parsed expressions, constants, black boxes) and form operations
//! (wedge, interior product, exterior derivative, pullback, conformal
//! scaling). The whole tree evaluates generically in any [`Num`] scalar,
//! which is what makes `d`, Jacobians and nested derivatives exact for
//! expression-built data: derivatives of subtrees are taken by fresh
//! forward-mode seeding and composed as truncated Taylor expansions.
//! Black-box sources fall back to central differences.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{GeomError, Result};
use crate::expr::Expr;
use crate::multiindex::{binomial, insert_sign, merge_sign, multi_indices, rank};
use crate::num::{det_cofactor, fd_jets, jets, Dual, Dual2, GenericFn, Jet, Num};
use crate::tube::TubularModel;

pub type Point = Vec<f64>;

/// Closure type for black-box coefficient sources.
pub type BoxFn = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;

// ---------------------------------------------------------------------------
// Generic dispatch over the closed set of scalar types
// ---------------------------------------------------------------------------

/// Custom field nodes (quadrature-defined potentials, the homotopy
/// one-form) implement this to stay evaluable at every scalar type.
pub trait CustomField: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn degree(&self) -> usize;
    fn eval_f64(&self, p: &[f64]) -> Result<Vec<f64>>;
    fn eval_dual(&self, p: &[Dual]) -> Result<Vec<Dual>>;
    fn eval_dual2(&self, p: &[Dual2]) -> Result<Vec<Dual2>>;
}

/// Custom smooth maps (tube charts, fiberwise linear maps).
pub trait CustomMap: Send + Sync + Debug {
    fn n_in(&self) -> usize;
    fn n_out(&self) -> usize;
    fn eval_f64(&self, p: &[f64]) -> Result<Vec<f64>>;
    fn eval_dual(&self, p: &[Dual]) -> Result<Vec<Dual>>;
    fn eval_dual2(&self, p: &[Dual2]) -> Result<Vec<Dual2>>;
}

/// Scalars that can dispatch into custom nodes. Implemented exactly for
/// `f64`, [`Dual`] and [`Dual2`].
pub(crate) trait NumDispatch: Num {
    fn custom_field(f: &dyn CustomField, p: &[Self]) -> Result<Vec<Self>>;
    fn custom_map(m: &dyn CustomMap, p: &[Self]) -> Result<Vec<Self>>;
}

impl NumDispatch for f64 {
    fn custom_field(f: &dyn CustomField, p: &[Self]) -> Result<Vec<Self>> {
        f.eval_f64(p)
    }
    fn custom_map(m: &dyn CustomMap, p: &[Self]) -> Result<Vec<Self>> {
        m.eval_f64(p)
    }
}

impl NumDispatch for Dual {
    fn custom_field(f: &dyn CustomField, p: &[Self]) -> Result<Vec<Self>> {
        f.eval_dual(p)
    }
    fn custom_map(m: &dyn CustomMap, p: &[Self]) -> Result<Vec<Self>> {
        m.eval_dual(p)
    }
}

impl NumDispatch for Dual2 {
    fn custom_field(f: &dyn CustomField, p: &[Self]) -> Result<Vec<Self>> {
        f.eval_dual2(p)
    }
    fn custom_map(m: &dyn CustomMap, p: &[Self]) -> Result<Vec<Self>> {
        m.eval_dual2(p)
    }
}

// ---------------------------------------------------------------------------
// Pointwise values
// ---------------------------------------------------------------------------

/// A degree-`k` form value on an `n`-dimensional patch: one coefficient
/// per strictly increasing multi-index, lexicographically ordered.
/// Degrees beyond `n` collapse to the canonical zero value with an empty
/// index set.
#[derive(Debug, Clone, PartialEq)]
pub struct KFormValue {
    pub n: usize,
    pub k: usize,
    pub coeffs: Vec<f64>,
}

impl KFormValue {
    pub fn zero(n: usize, k: usize) -> Self {
        KFormValue {
            n,
            k,
            coeffs: vec![0.0; binomial(n, k)],
        }
    }

    pub fn from_coeffs(n: usize, k: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != binomial(n, k) {
            return Err(GeomError::DimensionMismatch {
                context: "form coefficient count",
                expected: binomial(n, k),
                got: coeffs.len(),
            });
        }
        Ok(KFormValue { n, k, coeffs })
    }

    /// Scalar (degree 0) value.
    pub fn scalar(n: usize, v: f64) -> Self {
        KFormValue {
            n,
            k: 0,
            coeffs: vec![v],
        }
    }

    pub fn wedge(&self, o: &KFormValue) -> Result<KFormValue> {
        if self.n != o.n {
            return Err(GeomError::DimensionMismatch {
                context: "wedge",
                expected: self.n,
                got: o.n,
            });
        }
        Ok(KFormValue {
            n: self.n,
            k: self.k + o.k,
            coeffs: wedge_coeffs(self.n, self.k, o.k, &self.coeffs, &o.coeffs),
        })
    }

    /// Contraction in the first slot with a vector.
    pub fn interior(&self, x: &VectorFieldValue) -> Result<KFormValue> {
        if self.k == 0 {
            return Err(GeomError::DegreeMismatch {
                context: "interior product",
                expected: 1,
                got: 0,
            });
        }
        if x.components.len() != self.n {
            return Err(GeomError::DimensionMismatch {
                context: "interior product",
                expected: self.n,
                got: x.components.len(),
            });
        }
        Ok(KFormValue {
            n: self.n,
            k: self.k - 1,
            coeffs: interior_coeffs(self.n, self.k, &x.components, &self.coeffs),
        })
    }

    /// Evaluate the form on `k` vectors.
    pub fn apply(&self, vectors: &[Vec<f64>]) -> Result<f64> {
        if vectors.len() != self.k {
            return Err(GeomError::DegreeMismatch {
                context: "form application",
                expected: self.k,
                got: vectors.len(),
            });
        }
        let mut acc = 0.0;
        for (r, idx) in multi_indices(self.n, self.k).iter().enumerate() {
            let m = self.k;
            let mut minor = Vec::with_capacity(m * m);
            for &i in idx {
                for v in vectors {
                    minor.push(v[i]);
                }
            }
            acc += self.coeffs[r] * det_cofactor::<f64>(&minor, m);
        }
        Ok(acc)
    }

    pub fn add(&self, o: &KFormValue) -> KFormValue {
        KFormValue {
            n: self.n,
            k: self.k,
            coeffs: self
                .coeffs
                .iter()
                .zip(&o.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, o: &KFormValue) -> KFormValue {
        KFormValue {
            n: self.n,
            k: self.k,
            coeffs: self
                .coeffs
                .iter()
                .zip(&o.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> KFormValue {
        KFormValue {
            n: self.n,
            k: self.k,
            coeffs: self.coeffs.iter().map(|x| c * x).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// A tangent vector value.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldValue {
    pub components: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Generic coefficient kernels
// ---------------------------------------------------------------------------

pub(crate) fn wedge_coeffs<T: Num>(n: usize, ka: usize, kb: usize, a: &[T], b: &[T]) -> Vec<T> {
    let kc = ka + kb;
    let mut out = vec![T::con(0.0); binomial(n, kc)];
    if out.is_empty() {
        return out;
    }
    let idx_a = multi_indices(n, ka);
    let idx_b = multi_indices(n, kb);
    for (ra, ia) in idx_a.iter().enumerate() {
        for (rb, ib) in idx_b.iter().enumerate() {
            if let Some((merged, sign)) = merge_sign(ia, ib) {
                let rc = rank(n, &merged);
                out[rc] = out[rc].clone() + (a[ra].clone() * b[rb].clone()).scale(sign);
            }
        }
    }
    out
}

pub(crate) fn interior_coeffs<T: Num>(n: usize, k: usize, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::con(0.0); binomial(n, k - 1)];
    for (r, j_idx) in multi_indices(n, k - 1).iter().enumerate() {
        for i in 0..n {
            if let Some((full, sign)) = insert_sign(j_idx, i) {
                let rf = rank(n, &full);
                out[r] = out[r].clone() + (x[i].clone() * w[rf].clone()).scale(sign);
            }
        }
    }
    out
}

/// Pullback coefficients: `(F^* w)_I = sum_J w_J det(J_F[J rows, I cols])`.
/// `jac` is row-major `n_out x n_in` with entry `(i, j) = dF_i/dx_j`.
pub(crate) fn pullback_coeffs<T: Num>(
    n_in: usize,
    n_out: usize,
    k: usize,
    jac: &[T],
    w: &[T],
) -> Vec<T> {
    let mut out = vec![T::con(0.0); binomial(n_in, k)];
    let idx_in = multi_indices(n_in, k);
    let idx_out = multi_indices(n_out, k);
    for (ri, cols) in idx_in.iter().enumerate() {
        for (rj, rows) in idx_out.iter().enumerate() {
            let mut minor = Vec::with_capacity(k * k);
            for &r in rows {
                for &c in cols {
                    minor.push(jac[r * n_in + c].clone());
                }
            }
            out[ri] = out[ri].clone() + w[rj].clone() * det_cofactor(&minor, k);
        }
    }
    out
}

/// The skew matrix `A_ij = w(e_i, e_j)` of a 2-form value (generic).
pub(crate) fn skew_matrix<T: Num>(n: usize, coeffs: &[T]) -> Vec<T> {
    let mut a = vec![T::con(0.0); n * n];
    for (r, idx) in multi_indices(n, 2).iter().enumerate() {
        let (i, j) = (idx[0], idx[1]);
        a[i * n + j] = coeffs[r].clone();
        a[j * n + i] = -coeffs[r].clone();
    }
    a
}

// ---------------------------------------------------------------------------
// Smooth maps
// ---------------------------------------------------------------------------

#[derive(Clone)]
enum MapNode {
    Identity,
    /// `p -> A p + b`, row-major `n_out x n_in`.
    Linear { a: Vec<f64>, b: Vec<f64> },
    Exprs(Vec<Expr>),
    /// `outer(inner(p))`.
    Composite(SmoothMap, SmoothMap),
    BlackBox {
        f: BoxFn,
        jac: Option<BoxFn>,
    },
    /// The tube retraction `phi_t`.
    Retraction { tube: TubularModel, t: f64 },
    Custom(Arc<dyn CustomMap>),
}

impl Debug for MapNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MapNode::Identity => write!(f, "Identity"),
            MapNode::Linear { .. } => write!(f, "Linear"),
            MapNode::Exprs(_) => write!(f, "Exprs"),
            MapNode::Composite(a, b) => write!(f, "Composite({a:?}, {b:?})"),
            MapNode::BlackBox { .. } => write!(f, "BlackBox"),
            MapNode::Retraction { t, .. } => write!(f, "Retraction(t={t})"),
            MapNode::Custom(c) => write!(f, "Custom({c:?})"),
        }
    }
}

/// A differentiable map between coordinate patches, with Jacobians by
/// forward AD (or declared/central-difference Jacobians for black boxes).
#[derive(Debug, Clone)]
pub struct SmoothMap {
    pub n_in: usize,
    pub n_out: usize,
    node: Arc<MapNode>,
}

pub(crate) struct MapFn<'a>(pub &'a SmoothMap);

impl GenericFn for MapFn<'_> {
    fn call_f64(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.0.eval_num(q)
    }
    fn call_dual(&self, q: &[Dual]) -> Result<Vec<Dual>> {
        self.0.eval_num(q)
    }
    fn call_dual2(&self, q: &[Dual2]) -> Result<Vec<Dual2>> {
        self.0.eval_num(q)
    }
}

impl SmoothMap {
    pub fn identity(n: usize) -> Self {
        SmoothMap {
            n_in: n,
            n_out: n,
            node: Arc::new(MapNode::Identity),
        }
    }

    pub fn linear(n_out: usize, n_in: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != n_out * n_in || b.len() != n_out {
            return Err(GeomError::InvalidInput("linear map shape mismatch".into()));
        }
        Ok(SmoothMap {
            n_in,
            n_out,
            node: Arc::new(MapNode::Linear { a, b }),
        })
    }

    pub fn from_exprs(n_in: usize, components: Vec<Expr>) -> Self {
        SmoothMap {
            n_in,
            n_out: components.len(),
            node: Arc::new(MapNode::Exprs(components)),
        }
    }

    pub fn compose(outer: &SmoothMap, inner: &SmoothMap) -> Result<Self> {
        if outer.n_in != inner.n_out {
            return Err(GeomError::DimensionMismatch {
                context: "map composition",
                expected: outer.n_in,
                got: inner.n_out,
            });
        }
        Ok(SmoothMap {
            n_in: inner.n_in,
            n_out: outer.n_out,
            node: Arc::new(MapNode::Composite(outer.clone(), inner.clone())),
        })
    }

    pub fn black_box(n_in: usize, n_out: usize, f: BoxFn, jac: Option<BoxFn>) -> Self {
        SmoothMap {
            n_in,
            n_out,
            node: Arc::new(MapNode::BlackBox { f, jac }),
        }
    }

    pub fn retraction(tube: TubularModel, t: f64) -> Self {
        let n = tube.submanifold.ambient_dim;
        SmoothMap {
            n_in: n,
            n_out: n,
            node: Arc::new(MapNode::Retraction { tube, t }),
        }
    }

    pub fn custom(map: Arc<dyn CustomMap>) -> Self {
        SmoothMap {
            n_in: map.n_in(),
            n_out: map.n_out(),
            node: Arc::new(MapNode::Custom(map)),
        }
    }

    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.eval_num(p)
    }

    /// Row-major `n_out x n_in` Jacobian.
    pub fn jacobian(&self, p: &[f64]) -> Result<Vec<f64>> {
        if let MapNode::BlackBox { jac: Some(j), .. } = &*self.node {
            return j(p);
        }
        let js = jets(&MapFn(self), p, 1)?;
        let mut out = Vec::with_capacity(self.n_out * self.n_in);
        for j in js {
            out.extend_from_slice(&j.g);
        }
        Ok(out)
    }

    /// Cross-check the Jacobian against a central-difference probe.
    pub fn check_jacobian(&self, samples: &[Vec<f64>], tol: f64) -> Result<()> {
        for p in samples {
            let jac = self.jacobian(p)?;
            let probe = fd_jets(&|q: &[f64]| self.apply(q), p, 1)?;
            for (i, jet) in probe.iter().enumerate() {
                for j in 0..self.n_in {
                    let d = (jac[i * self.n_in + j] - jet.g[j]).abs();
                    if d > tol {
                        return Err(GeomError::InvalidInput(format!(
                            "jacobian entry ({i},{j}) off by {d:.3e} at {p:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn eval_num<T: NumDispatch>(&self, p: &[T]) -> Result<Vec<T>> {
        if p.len() != self.n_in {
            return Err(GeomError::DimensionMismatch {
                context: "map evaluation",
                expected: self.n_in,
                got: p.len(),
            });
        }
        match &*self.node {
            MapNode::Identity => Ok(p.to_vec()),
            MapNode::Linear { a, b } => Ok((0..self.n_out)
                .map(|i| {
                    let mut acc = T::con(b[i]);
                    for j in 0..self.n_in {
                        acc = acc + p[j].scale(a[i * self.n_in + j]);
                    }
                    acc
                })
                .collect()),
            MapNode::Exprs(components) => components
                .iter()
                .map(|e| e.eval_num(p).map_err(GeomError::from))
                .collect(),
            MapNode::Composite(outer, inner) => outer.eval_num(&inner.eval_num(p)?),
            MapNode::BlackBox { f, jac } => {
                let base: Vec<f64> = p.iter().map(|x| x.val()).collect();
                if T::ORDER == 0 {
                    return Ok(f(&base)?.into_iter().map(T::con).collect());
                }
                let js = if T::ORDER == 1 {
                    if let Some(jfn) = jac {
                        let vals = f(&base)?;
                        let jm = jfn(&base)?;
                        vals.into_iter()
                            .enumerate()
                            .map(|(i, v)| Jet {
                                v,
                                g: jm[i * self.n_in..(i + 1) * self.n_in].to_vec(),
                                h: Vec::new(),
                                t: Vec::new(),
                            })
                            .collect()
                    } else {
                        fd_jets(&|q: &[f64]| f(q), &base, 1)?
                    }
                } else {
                    fd_jets(&|q: &[f64]| f(q), &base, T::ORDER)?
                };
                let delta = deltas(p, &base);
                Ok(js.iter().map(|j| T::from_jet(j, &delta)).collect())
            }
            MapNode::Retraction { tube, t } => {
                let r = crate::tube::RetractionFamily::new(tube.clone());
                r.phi_num(*t, p)
            }
            MapNode::Custom(map) => T::custom_map(map.as_ref(), p),
        }
    }
}

pub(crate) fn deltas<T: Num>(p: &[T], base: &[f64]) -> Vec<T> {
    p.iter()
        .zip(base)
        .map(|(x, &b)| x.clone() - T::con(b))
        .collect()
}

// ---------------------------------------------------------------------------
// Vector fields
// ---------------------------------------------------------------------------

#[derive(Clone)]
enum VfNode {
    Constant(Vec<f64>),
    Exprs(Vec<Expr>),
    BlackBox(BoxFn),
}

/// A vector field on a coordinate patch.
#[derive(Clone)]
pub struct VectorField {
    pub n: usize,
    node: Arc<VfNode>,
}

impl Debug for VectorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VectorField(n={})", self.n)
    }
}

impl VectorField {
    pub fn constant(components: Vec<f64>) -> Self {
        VectorField {
            n: components.len(),
            node: Arc::new(VfNode::Constant(components)),
        }
    }

    pub fn from_exprs(n: usize, components: Vec<Expr>) -> Result<Self> {
        if components.len() != n {
            return Err(GeomError::DimensionMismatch {
                context: "vector field components",
                expected: n,
                got: components.len(),
            });
        }
        Ok(VectorField {
            n,
            node: Arc::new(VfNode::Exprs(components)),
        })
    }

    pub fn black_box(n: usize, f: BoxFn) -> Self {
        VectorField {
            n,
            node: Arc::new(VfNode::BlackBox(f)),
        }
    }

    pub fn value(&self, p: &[f64]) -> Result<VectorFieldValue> {
        Ok(VectorFieldValue {
            components: self.eval_num(p)?,
        })
    }

    pub(crate) fn eval_num<T: NumDispatch>(&self, p: &[T]) -> Result<Vec<T>> {
        match &*self.node {
            VfNode::Constant(c) => Ok(c.iter().map(|&x| T::con(x)).collect()),
            VfNode::Exprs(components) => components
                .iter()
                .map(|e| e.eval_num(p).map_err(GeomError::from))
                .collect(),
            VfNode::BlackBox(f) => {
                let base: Vec<f64> = p.iter().map(|x| x.val()).collect();
                if T::ORDER == 0 {
                    return Ok(f(&base)?.into_iter().map(T::con).collect());
                }
                let js = fd_jets(&|q: &[f64]| f(q), &base, T::ORDER)?;
                let delta = deltas(p, &base);
                Ok(js.iter().map(|j| T::from_jet(j, &delta)).collect())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Form fields
// ---------------------------------------------------------------------------

#[derive(Clone)]
enum FieldNode {
    Coeffs(Vec<Expr>),
    ConstCoeffs(Vec<f64>),
    BlackBox(BoxFn),
    Add(KFormField, KFormField),
    Scale(f64, KFormField),
    /// `e^{sign * f(p)} * base(p)` for a degree-0 exponent field.
    ExpScale {
        exponent: KFormField,
        sign: f64,
        base: KFormField,
    },
    Wedge(KFormField, KFormField),
    Interior(VectorField, KFormField),
    D(KFormField),
    Pullback(SmoothMap, KFormField),
    Custom(Arc<dyn CustomField>),
}

/// A differential-form field: degree-`k` form-valued function on an
/// `n`-dimensional patch. Cheap to clone (nodes are shared).
#[derive(Clone)]
pub struct KFormField {
    n: usize,
    k: usize,
    node: Arc<FieldNode>,
}

impl Debug for KFormField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KFormField(n={}, k={})", self.n, self.k)
    }
}

pub(crate) struct FieldFn<'a>(pub &'a KFormField);

impl GenericFn for FieldFn<'_> {
    fn call_f64(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.0.eval_num(q)
    }
    fn call_dual(&self, q: &[Dual]) -> Result<Vec<Dual>> {
        self.0.eval_num(q)
    }
    fn call_dual2(&self, q: &[Dual2]) -> Result<Vec<Dual2>> {
        self.0.eval_num(q)
    }
}

impl KFormField {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn mk(n: usize, k: usize, node: FieldNode) -> Self {
        KFormField {
            n,
            k,
            node: Arc::new(node),
        }
    }

    pub fn zero(n: usize, k: usize) -> Self {
        Self::mk(n, k, FieldNode::ConstCoeffs(vec![0.0; binomial(n, k)]))
    }

    /// Constant-coefficient form.
    pub fn constant(n: usize, k: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != binomial(n, k) {
            return Err(GeomError::DimensionMismatch {
                context: "constant form coefficients",
                expected: binomial(n, k),
                got: coeffs.len(),
            });
        }
        Ok(Self::mk(n, k, FieldNode::ConstCoeffs(coeffs)))
    }

    /// Build a field from `(multi-index, expression)` entries. Indices are
    /// 1-based and strictly increasing; omitted indices are zero.
    pub fn from_exprs(n: usize, k: usize, entries: &[(Vec<usize>, Expr)]) -> Result<Self> {
        let mut coeffs = vec![Expr::Const(0.0); binomial(n, k)];
        let mut seen = vec![false; coeffs.len()];
        for (idx, e) in entries {
            if idx.len() != k {
                return Err(GeomError::DegreeMismatch {
                    context: "form entry multi-index",
                    expected: k,
                    got: idx.len(),
                });
            }
            let zero_based: Vec<usize> = idx
                .iter()
                .map(|&i| {
                    if i >= 1 && i <= n {
                        Ok(i - 1)
                    } else {
                        Err(GeomError::InvalidInput(format!(
                            "multi-index entry {i} out of range 1..={n}"
                        )))
                    }
                })
                .collect::<Result<_>>()?;
            if !zero_based.windows(2).all(|w| w[0] < w[1]) {
                return Err(GeomError::InvalidInput(format!(
                    "multi-index {idx:?} is not strictly increasing"
                )));
            }
            let r = rank(n, &zero_based);
            if seen[r] {
                return Err(GeomError::InvalidInput(format!(
                    "repeated multi-index {idx:?}"
                )));
            }
            seen[r] = true;
            coeffs[r] = e.clone();
        }
        Ok(Self::mk(n, k, FieldNode::Coeffs(coeffs)))
    }

    /// Scalar field from a single expression.
    pub fn scalar_from_expr(n: usize, e: Expr) -> Self {
        Self::mk(n, 0, FieldNode::Coeffs(vec![e]))
    }

    pub fn black_box(n: usize, k: usize, f: BoxFn) -> Self {
        Self::mk(n, k, FieldNode::BlackBox(f))
    }

    pub fn custom(node: Arc<dyn CustomField>) -> Self {
        let (n, k) = (node.dim(), node.degree());
        Self::mk(n, k, FieldNode::Custom(node))
    }

    pub fn add(&self, o: &KFormField) -> Result<Self> {
        if self.n != o.n {
            return Err(GeomError::DimensionMismatch {
                context: "form addition",
                expected: self.n,
                got: o.n,
            });
        }
        if self.k != o.k {
            return Err(GeomError::DegreeMismatch {
                context: "form addition",
                expected: self.k,
                got: o.k,
            });
        }
        Ok(Self::mk(self.n, self.k, FieldNode::Add(self.clone(), o.clone())))
    }

    pub fn sub(&self, o: &KFormField) -> Result<Self> {
        self.add(&o.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::mk(self.n, self.k, FieldNode::Scale(c, self.clone()))
    }

    /// `e^{sign * f} * self` for a degree-0 field `f`.
    pub fn exp_scale(&self, exponent: &KFormField, sign: f64) -> Result<Self> {
        if exponent.k != 0 {
            return Err(GeomError::DegreeMismatch {
                context: "conformal exponent",
                expected: 0,
                got: exponent.k,
            });
        }
        if exponent.n != self.n {
            return Err(GeomError::DimensionMismatch {
                context: "conformal exponent",
                expected: self.n,
                got: exponent.n,
            });
        }
        Ok(Self::mk(
            self.n,
            self.k,
            FieldNode::ExpScale {
                exponent: exponent.clone(),
                sign,
                base: self.clone(),
            },
        ))
    }

    pub fn wedge(&self, o: &KFormField) -> Result<Self> {
        if self.n != o.n {
            return Err(GeomError::DimensionMismatch {
                context: "wedge",
                expected: self.n,
                got: o.n,
            });
        }
        Ok(Self::mk(
            self.n,
            self.k + o.k,
            FieldNode::Wedge(self.clone(), o.clone()),
        ))
    }

    pub fn interior(&self, x: &VectorField) -> Result<Self> {
        if self.k == 0 {
            return Err(GeomError::DegreeMismatch {
                context: "interior product",
                expected: 1,
                got: 0,
            });
        }
        if x.n != self.n {
            return Err(GeomError::DimensionMismatch {
                context: "interior product",
                expected: self.n,
                got: x.n,
            });
        }
        Ok(Self::mk(
            self.n,
            self.k - 1,
            FieldNode::Interior(x.clone(), self.clone()),
        ))
    }

    /// Exterior derivative. For `k = n` this is the zero field of degree
    /// `n + 1`, not an error.
    pub fn d(&self) -> Self {
        if self.k >= self.n {
            return Self::zero(self.n, self.k + 1);
        }
        Self::mk(self.n, self.k + 1, FieldNode::D(self.clone()))
    }

    /// Lie derivative by Cartan's formula `L_X = i_X d + d i_X`.
    pub fn lie(&self, x: &VectorField) -> Result<Self> {
        let a = self.d().interior(x)?;
        if self.k == 0 {
            return Ok(a);
        }
        a.add(&self.interior(x)?.d())
    }

    pub fn pullback(map: &SmoothMap, w: &KFormField) -> Result<Self> {
        if map.n_out != w.n {
            return Err(GeomError::DimensionMismatch {
                context: "pullback",
                expected: w.n,
                got: map.n_out,
            });
        }
        Ok(Self::mk(
            map.n_in,
            w.k,
            FieldNode::Pullback(map.clone(), w.clone()),
        ))
    }

    pub fn value(&self, p: &[f64]) -> Result<KFormValue> {
        Ok(KFormValue {
            n: self.n,
            k: self.k,
            coeffs: self.eval_num(p)?,
        })
    }

    pub(crate) fn eval_num<T: NumDispatch>(&self, p: &[T]) -> Result<Vec<T>> {
        if p.len() != self.n {
            return Err(GeomError::DimensionMismatch {
                context: "field evaluation",
                expected: self.n,
                got: p.len(),
            });
        }
        match &*self.node {
            FieldNode::Coeffs(exprs) => exprs
                .iter()
                .map(|e| e.eval_num(p).map_err(GeomError::from))
                .collect(),
            FieldNode::ConstCoeffs(coeffs) => Ok(coeffs.iter().map(|&c| T::con(c)).collect()),
            FieldNode::BlackBox(f) => {
                let base: Vec<f64> = p.iter().map(|x| x.val()).collect();
                if T::ORDER == 0 {
                    return Ok(f(&base)?.into_iter().map(T::con).collect());
                }
                let js = fd_jets(&|q: &[f64]| f(q), &base, T::ORDER)?;
                let delta = deltas(p, &base);
                Ok(js.iter().map(|j| T::from_jet(j, &delta)).collect())
            }
            FieldNode::Add(a, b) => {
                let va = a.eval_num(p)?;
                let vb = b.eval_num(p)?;
                Ok(va.into_iter().zip(vb).map(|(x, y)| x + y).collect())
            }
            FieldNode::Scale(c, a) => {
                Ok(a.eval_num(p)?.into_iter().map(|x| x.scale(*c)).collect())
            }
            FieldNode::ExpScale {
                exponent,
                sign,
                base,
            } => {
                let e = exponent.eval_num(p)?.remove(0);
                let factor = e.scale(*sign).exp();
                Ok(base
                    .eval_num(p)?
                    .into_iter()
                    .map(|x| x * factor.clone())
                    .collect())
            }
            FieldNode::Wedge(a, b) => {
                let va = a.eval_num(p)?;
                let vb = b.eval_num(p)?;
                Ok(wedge_coeffs(self.n, a.k, b.k, &va, &vb))
            }
            FieldNode::Interior(x, w) => {
                let vx = x.eval_num(p)?;
                let vw = w.eval_num(p)?;
                Ok(interior_coeffs(self.n, w.k, &vx, &vw))
            }
            FieldNode::D(w) => {
                let base: Vec<f64> = p.iter().map(|x| x.val()).collect();
                let js = jets(&FieldFn(w), &base, T::ORDER + 1)?;
                let delta = deltas(p, &base);
                let n = self.n;
                let inner_indices = multi_indices(n, w.k);
                let mut out = Vec::with_capacity(binomial(n, self.k));
                for idx in multi_indices(n, self.k) {
                    let mut acc = T::con(0.0);
                    for (pos, &i) in idx.iter().enumerate() {
                        let mut sub = idx.clone();
                        sub.remove(pos);
                        let rj = rank(n, &sub);
                        debug_assert_eq!(inner_indices[rj], sub);
                        let partial = js[rj].partial(i, n);
                        let term = T::from_jet(&partial, &delta);
                        acc = if pos % 2 == 0 { acc + term } else { acc - term };
                    }
                    out.push(acc);
                }
                Ok(out)
            }
            FieldNode::Pullback(map, w) => {
                let base: Vec<f64> = p.iter().map(|x| x.val()).collect();
                let image = map.eval_num(p)?;
                let js = jets(&MapFn(map), &base, T::ORDER + 1)?;
                let delta = deltas(p, &base);
                let n_in = map.n_in;
                let n_out = map.n_out;
                let mut jac = Vec::with_capacity(n_out * n_in);
                for jet in &js {
                    for j in 0..n_in {
                        jac.push(T::from_jet(&jet.partial(j, n_in), &delta));
                    }
                }
                let vw = w.eval_num(&image)?;
                Ok(pullback_coeffs(n_in, n_out, w.k, &jac, &vw))
            }
            FieldNode::Custom(node) => T::custom_field(node.as_ref(), p),
        }
    }
}

/// Pointwise pullback by a numerically known map: the form value at the
/// image point contracted with a propagated Jacobian (row-major
/// `n_out x n_in`).
pub fn pullback_value(w_at_image: &KFormValue, jac: &[f64], n_in: usize) -> KFormValue {
    KFormValue {
        n: n_in,
        k: w_at_image.k,
        coeffs: pullback_coeffs(n_in, w_at_image.n, w_at_image.k, jac, &w_at_image.coeffs),
    }
}

// ---------------------------------------------------------------------------
// Nondegeneracy
// ---------------------------------------------------------------------------

/// Verdict of the skew-matrix nondegeneracy test of a 2-form value.
#[derive(Debug, Clone, Copy)]
pub struct Nondegeneracy {
    pub nondegenerate: bool,
    /// Ratio of extreme singular values (condition number).
    pub condition: f64,
    pub min_singular: f64,
}

/// Assemble `A_ij = w(e_i, e_j)` and test `|det A|` against `threshold`.
/// Odd dimensions always report degenerate.
pub fn nondegeneracy(w: &KFormValue, threshold: f64) -> Result<Nondegeneracy> {
    if w.k != 2 {
        return Err(GeomError::DegreeMismatch {
            context: "nondegeneracy",
            expected: 2,
            got: w.k,
        });
    }
    let n = w.n;
    let a = skew_matrix::<f64>(n, &w.coeffs);
    let m = nalgebra::DMatrix::from_row_slice(n, n, &a);
    let det = m.clone().lu().determinant();
    let svd = m.svd(false, false);
    let max_s = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let min_s = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let condition = if min_s > 0.0 { max_s / min_s } else { f64::INFINITY };
    Ok(Nondegeneracy {
        nondegenerate: det.abs() > threshold,
        condition,
        min_singular: min_s,
    })
}

// ---------------------------------------------------------------------------
// Metric fields
// ---------------------------------------------------------------------------

/// A Riemannian metric on a patch, as a symmetric matrix of expressions.
/// `None` entries mean the flat euclidean metric.
#[derive(Debug, Clone)]
pub struct MetricField {
    pub n: usize,
    entries: Option<Arc<Vec<Expr>>>,
}

impl MetricField {
    pub fn euclidean(n: usize) -> Self {
        MetricField { n, entries: None }
    }

    pub fn from_exprs(n: usize, entries: Vec<Expr>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(GeomError::DimensionMismatch {
                context: "metric entries",
                expected: n * n,
                got: entries.len(),
            });
        }
        Ok(MetricField {
            n,
            entries: Some(Arc::new(entries)),
        })
    }

    /// Row-major `n x n` matrix value.
    pub fn value(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.eval_num(p)
    }

    pub(crate) fn eval_num<T: NumDispatch>(&self, p: &[T]) -> Result<Vec<T>> {
        match &self.entries {
            None => {
                let mut m = vec![T::con(0.0); self.n * self.n];
                for i in 0..self.n {
                    m[i * self.n + i] = T::con(1.0);
                }
                Ok(m)
            }
            Some(entries) => entries
                .iter()
                .map(|e| e.eval_num(p).map_err(GeomError::from))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use approx::assert_relative_eq;

    fn dx(n: usize, i: usize) -> KFormValue {
        let mut c = vec![0.0; n];
        c[i - 1] = 1.0;
        KFormValue::from_coeffs(n, 1, c).unwrap()
    }

    #[test]
    fn wedge_basis() {
        let w = dx(2, 1).wedge(&dx(2, 2)).unwrap();
        assert_eq!(w.coeffs, vec![1.0]);
    }

    #[test]
    fn wedge_of_one_form_with_itself_vanishes() {
        let a = KFormValue::from_coeffs(3, 1, vec![1.5, -2.0, 0.25]).unwrap();
        let w = a.wedge(&a).unwrap();
        assert!(w.coeffs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn wedge_hand_expansion() {
        // (p1 dx1 + p2 dx2) ^ (a dx1) at (p1, p2) = (3, 5), a = 2
        let alpha = KFormValue::from_coeffs(2, 1, vec![3.0, 5.0]).unwrap();
        let beta = KFormValue::from_coeffs(2, 1, vec![2.0, 0.0]).unwrap();
        let w = alpha.wedge(&beta).unwrap();
        assert_relative_eq!(w.coeffs[0], -10.0, max_relative = 1e-15);
    }

    #[test]
    fn wedge_graded_commutativity() {
        // 1-form vs 2-form in n=4: a^b = (+1)^{1*2} b^a
        let a = KFormValue::from_coeffs(4, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let b = KFormValue::from_coeffs(4, 2, vec![2.0, 0.0, -1.0, 4.0, 0.5, 1.0]).unwrap();
        let ab = a.wedge(&b).unwrap();
        let ba = b.wedge(&a).unwrap();
        for (x, y) in ab.coeffs.iter().zip(&ba.coeffs) {
            assert_relative_eq!(x, y, max_relative = 1e-15);
        }
    }

    #[test]
    fn wedge_beyond_top_degree_is_empty_zero() {
        let a = KFormValue::from_coeffs(2, 2, vec![1.0]).unwrap();
        let b = KFormValue::from_coeffs(2, 1, vec![1.0, 0.0]).unwrap();
        let w = a.wedge(&b).unwrap();
        assert_eq!(w.k, 3);
        assert!(w.coeffs.is_empty());
    }

    #[test]
    fn interior_basis_contraction() {
        let w = dx(2, 1).wedge(&dx(2, 2)).unwrap();
        let x = VectorFieldValue {
            components: vec![1.0, 0.0],
        };
        let c = w.interior(&x).unwrap();
        assert_eq!(c.coeffs, vec![0.0, 1.0]); // dx2
    }

    #[test]
    fn interior_standard_symplectic_4d() {
        // omega = dx1^dx3 + dx2^dx4, X = e1 -> dx3
        let mut coeffs = vec![0.0; 6];
        coeffs[rank(4, &[0, 2])] = 1.0;
        coeffs[rank(4, &[1, 3])] = 1.0;
        let w = KFormValue::from_coeffs(4, 2, coeffs).unwrap();
        let x = VectorFieldValue {
            components: vec![1.0, 0.0, 0.0, 0.0],
        };
        let c = w.interior(&x).unwrap();
        assert_eq!(c.coeffs, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn interior_is_linear_and_nilpotent() {
        let w = KFormValue::from_coeffs(3, 2, vec![1.0, -0.5, 2.0]).unwrap();
        let x = VectorFieldValue {
            components: vec![0.3, -1.1, 0.7],
        };
        let scaled = w.scale(2.5).interior(&x).unwrap();
        let direct = w.interior(&x).unwrap().scale(2.5);
        for (a, b) in scaled.coeffs.iter().zip(&direct.coeffs) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
        let twice = w.interior(&x).unwrap().interior(&x).unwrap();
        assert!(twice.coeffs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn exterior_derivative_single_coefficient() {
        // d(x1 dx2) = dx1 ^ dx2
        let w =
            KFormField::from_exprs(2, 1, &[(vec![2], parse("x1", 2).unwrap())]).unwrap();
        let dw = w.d();
        let v = dw.value(&[0.7, -0.3]).unwrap();
        assert_relative_eq!(v.coeffs[0], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn d_squared_vanishes_for_expressions() {
        // f = sin(x1) * x2
        let f = KFormField::scalar_from_expr(2, parse("sin(x1)*x2", 2).unwrap());
        let ddf = f.d().d();
        let v = ddf.value(&[0.4, 1.3]).unwrap();
        assert!(v.max_abs() < 1e-10, "d(df) = {:?}", v.coeffs);
    }

    #[test]
    fn d_liouville_form() {
        // eta = p1 dx1 + p2 dx2 on a 4-dim (x, p) patch; d eta = dp_i ^ dx_i
        let eta = KFormField::from_exprs(
            4,
            1,
            &[
                (vec![1], parse("p1", 4).unwrap()),
                (vec![2], parse("p2", 4).unwrap()),
            ],
        )
        .unwrap();
        let deta = eta.d();
        let v = deta.value(&[0.3, -0.8, 1.2, 0.5]).unwrap();
        // dp1 ^ dx1 = -dx1 ^ dx3, dp2 ^ dx2 = -dx2 ^ dx4
        let mut expect = vec![0.0; 6];
        expect[rank(4, &[0, 2])] = -1.0;
        expect[rank(4, &[1, 3])] = -1.0;
        for (a, b) in v.coeffs.iter().zip(&expect) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn pullback_identity_and_linear_det() {
        let w = KFormField::from_exprs(2, 2, &[(vec![1, 2], parse("1", 2).unwrap())]).unwrap();
        let id = SmoothMap::identity(2);
        let pw = KFormField::pullback(&id, &w).unwrap();
        assert_eq!(pw.value(&[0.3, 0.4]).unwrap().coeffs, vec![1.0]);

        let a = vec![2.0, 1.0, 0.5, 3.0]; // det = 5.5
        let lin = SmoothMap::linear(2, 2, a, vec![0.0, 0.0]).unwrap();
        let pw = KFormField::pullback(&lin, &w).unwrap();
        assert_relative_eq!(
            pw.value(&[1.0, -1.0]).unwrap().coeffs[0],
            5.5,
            max_relative = 1e-13
        );
    }

    #[test]
    fn lie_derivative_cartan_examples() {
        // L_{e1}(x1 dx2) = dx2
        let w =
            KFormField::from_exprs(2, 1, &[(vec![2], parse("x1", 2).unwrap())]).unwrap();
        let x = VectorField::constant(vec![1.0, 0.0]);
        let lw = w.lie(&x).unwrap();
        let v = lw.value(&[0.9, 0.1]).unwrap();
        assert_relative_eq!(v.coeffs[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(v.coeffs[1], 1.0, epsilon = 1e-12);

        // constant-coefficient form, constant field -> 0
        let w = KFormField::constant(2, 2, vec![3.0]).unwrap();
        let lw = w.lie(&x).unwrap();
        assert!(lw.value(&[0.2, 0.4]).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn nondegeneracy_standard_and_zero() {
        let std2 = KFormValue::from_coeffs(2, 2, vec![1.0]).unwrap();
        let r = nondegeneracy(&std2, 1e-10).unwrap();
        assert!(r.nondegenerate);
        assert_relative_eq!(r.condition, 1.0, max_relative = 1e-12);

        let zero = KFormValue::zero(2, 2);
        assert!(!nondegeneracy(&zero, 1e-10).unwrap().nondegenerate);

        // odd dimension is always degenerate
        let odd = KFormValue::from_coeffs(3, 2, vec![1.0, 1.0, 1.0]).unwrap();
        assert!(!nondegeneracy(&odd, 1e-10).unwrap().nondegenerate);
    }

    #[test]
    fn form_from_entries_validates() {
        let bad = KFormField::from_exprs(
            2,
            2,
            &[(vec![2, 1], parse("1", 2).unwrap())],
        );
        assert!(bad.is_err());
        let dup = KFormField::from_exprs(
            2,
            1,
            &[
                (vec![1], parse("1", 2).unwrap()),
                (vec![1], parse("2", 2).unwrap()),
            ],
        );
        assert!(dup.is_err());
        let empty = KFormField::from_exprs(2, 2, &[]).unwrap();
        assert_eq!(empty.value(&[0.0, 0.0]).unwrap().coeffs, vec![0.0]);
    }

    #[test]
    fn exp_scale_round_trip() {
        let w = KFormField::from_exprs(2, 2, &[(vec![1, 2], parse("1 + x1", 2).unwrap())]).unwrap();
        let f = KFormField::scalar_from_expr(2, parse("x1*x2", 2).unwrap());
        let scaled = w.exp_scale(&f, 1.0).unwrap();
        let back = scaled.exp_scale(&f, -1.0).unwrap();
        let p = [0.37, -0.81];
        let a = w.value(&p).unwrap();
        let b = back.value(&p).unwrap();
        assert_relative_eq!(a.coeffs[0], b.coeffs[0], max_relative = 1e-12);
    }

    #[test]
    fn smooth_map_jacobian_cross_check() {
        let m = SmoothMap::from_exprs(
            2,
            vec![
                parse("x1*cos(x2)", 2).unwrap(),
                parse("x1*sin(x2)", 2).unwrap(),
            ],
        );
        m.check_jacobian(&[vec![1.2, 0.6], vec![0.5, -1.0]], 1e-7).unwrap();
    }
}

//! Control systems, input sets, controllers, and closed-loop vector fields.
//!
//! State space is ℝⁿ with coordinates `x1..xn`; inputs are `u1..um`.
//! Manifold examples are handled in reduced/chart coordinates supplied by
//! the user (e.g. a body-frame reduction with state-independent input
//! matrix), so every system here lives on a Euclidean bounding box.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dsl::{Binding, BoundExpr, DslError, Expr};
use crate::synthesis::BlendedController;

/// Norm tolerance for Ball/Sphere membership. Kept well below every search
/// tolerance in the crate (1e-6) so set-boundary effects cannot flip a
/// verdict.
pub const TOL_SET: f64 = 1e-9;

#[derive(Debug, Clone, Error)]
pub enum SystemError {
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid system: {0}")]
    Invalid(String),
    #[error("dynamics evaluation failed at p={p:?}{}: {source}", fmt_input(.u))]
    Eval {
        p: Vec<f64>,
        u: Option<Vec<f64>>,
        source: DslError,
    },
    #[error("controller failed at p={p:?}: {reason}")]
    Controller { p: Vec<f64>, reason: String },
}

fn fmt_input(u: &Option<Vec<f64>>) -> String {
    match u {
        Some(u) => format!(", u={u:?}"),
        None => String::new(),
    }
}

/// The admissible input set 𝒰 ⊆ ℝᵐ.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSet {
    /// All of ℝᵐ.
    FullSpace { m: usize },
    /// Componentwise box `[lower_i, upper_i]`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Closed ℓ² ball of the given radius centered at the origin.
    Ball { radius: f64 },
    /// The ℓ² sphere of the given radius (boundary only).
    Sphere { radius: f64 },
    /// A finite list of admissible inputs.
    FinitePoints { points: Vec<Vec<f64>> },
}

/// Result of a membership query: the verdict plus distance to the set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub inside: bool,
    pub distance: f64,
}

impl InputSet {
    /// Validates internal invariants and consistency with input dimension m.
    pub fn validate(&self, m: usize) -> Result<(), SystemError> {
        match self {
            InputSet::FullSpace { m: mm } => {
                if *mm != m {
                    return Err(SystemError::Dimension {
                        what: "input set".into(),
                        expected: m,
                        got: *mm,
                    });
                }
            }
            InputSet::Box { lower, upper } => {
                if lower.len() != m || upper.len() != m {
                    return Err(SystemError::Dimension {
                        what: "input box bounds".into(),
                        expected: m,
                        got: lower.len().max(upper.len()),
                    });
                }
                for i in 0..m {
                    if !(lower[i] <= upper[i]) {
                        return Err(SystemError::Invalid(format!(
                            "input box has lower[{i}] = {} > upper[{i}] = {}",
                            lower[i], upper[i]
                        )));
                    }
                }
            }
            InputSet::Ball { radius } | InputSet::Sphere { radius } => {
                if !(*radius > 0.0) {
                    return Err(SystemError::Invalid(format!(
                        "input set radius must be positive, got {radius}"
                    )));
                }
                if m == 0 {
                    return Err(SystemError::Invalid(
                        "ball/sphere input set requires m >= 1".into(),
                    ));
                }
            }
            InputSet::FinitePoints { points } => {
                if points.is_empty() {
                    return Err(SystemError::Invalid(
                        "finite input set must be non-empty".into(),
                    ));
                }
                for (k, pt) in points.iter().enumerate() {
                    if pt.len() != m {
                        return Err(SystemError::Dimension {
                            what: format!("finite input point {k}"),
                            expected: m,
                            got: pt.len(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Membership test with distance to the set as a side value.
    ///
    /// Box and FullSpace are exact; Ball and Sphere compare the norm with
    /// tolerance [`TOL_SET`]; FinitePoints matches within [`TOL_SET`] in ℓ².
    pub fn membership(&self, u: &[f64]) -> Membership {
        match self {
            InputSet::FullSpace { .. } => Membership {
                inside: true,
                distance: 0.0,
            },
            InputSet::Box { lower, upper } => {
                let mut d2 = 0.0;
                let mut inside = true;
                for i in 0..u.len() {
                    let below = lower[i] - u[i];
                    let above = u[i] - upper[i];
                    let gap = below.max(above).max(0.0);
                    if u[i] < lower[i] || u[i] > upper[i] {
                        inside = false;
                    }
                    d2 += gap * gap;
                }
                Membership {
                    inside,
                    distance: d2.sqrt(),
                }
            }
            InputSet::Ball { radius } => {
                let r = norm(u);
                Membership {
                    inside: r <= radius + TOL_SET,
                    distance: (r - radius).max(0.0),
                }
            }
            InputSet::Sphere { radius } => {
                let r = norm(u);
                Membership {
                    inside: (r - radius).abs() <= TOL_SET,
                    distance: (r - radius).abs(),
                }
            }
            InputSet::FinitePoints { points } => {
                let mut best = f64::INFINITY;
                for pt in points {
                    let d = dist(u, pt);
                    if d < best {
                        best = d;
                    }
                }
                Membership {
                    inside: best <= TOL_SET,
                    distance: best,
                }
            }
        }
    }

    /// Euclidean projection onto the set. Ties are broken deterministically:
    /// projecting the origin onto a sphere returns `radius * e1`, and ties
    /// among finite points go to the earliest listed.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            InputSet::FullSpace { .. } => u.to_vec(),
            InputSet::Box { lower, upper } => (0..u.len())
                .map(|i| u[i].clamp(lower[i], upper[i]))
                .collect(),
            InputSet::Ball { radius } => {
                let r = norm(u);
                if r <= *radius {
                    u.to_vec()
                } else {
                    u.iter().map(|v| v * radius / r).collect()
                }
            }
            InputSet::Sphere { radius } => {
                let r = norm(u);
                if r == 0.0 {
                    let mut e1 = vec![0.0; u.len()];
                    e1[0] = *radius;
                    e1
                } else {
                    u.iter().map(|v| v * radius / r).collect()
                }
            }
            InputSet::FinitePoints { points } => {
                let mut best = &points[0];
                let mut best_d = dist(u, best);
                for pt in &points[1..] {
                    let d = dist(u, pt);
                    if d < best_d {
                        best_d = d;
                        best = pt;
                    }
                }
                best.clone()
            }
        }
    }

    /// Whether the set is compact (bounded and closed).
    pub fn is_compact(&self) -> bool {
        !matches!(self, InputSet::FullSpace { .. })
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn state_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

fn state_input_names(n: usize, m: usize) -> Vec<String> {
    let mut names = state_names(n);
    names.extend((1..=m).map(|i| format!("u{i}")));
    names
}

fn check_vars(exprs: &[Expr], allowed: &[String], what: &str) -> Result<(), SystemError> {
    for e in exprs {
        for v in e.free_vars() {
            if !allowed.iter().any(|a| a == v) {
                return Err(SystemError::Invalid(format!(
                    "{what} uses variable `{v}` outside of {{{}}}",
                    allowed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

/// Control-affine system ẋ = X₀(x) + Σᵢ uⁱ Xᵢ(x) with input set 𝒰.
#[derive(Clone)]
pub struct ControlAffineSystem {
    n: usize,
    m: usize,
    drift: Vec<Expr>,
    inputs: Vec<Vec<Expr>>,
    input_set: InputSet,
    bound_drift: Arc<[BoundExpr]>,
    bound_inputs: Arc<[Vec<BoundExpr>]>,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("input_set", &self.input_set)
            .finish_non_exhaustive()
    }
}

impl ControlAffineSystem {
    /// `drift` has n components; `inputs` is one n-component field per input
    /// channel. All expressions may reference only `x1..xn`.
    pub fn new(
        n: usize,
        m: usize,
        drift: Vec<Expr>,
        inputs: Vec<Vec<Expr>>,
        input_set: InputSet,
    ) -> Result<Self, SystemError> {
        if n == 0 {
            return Err(SystemError::Invalid("state dimension must be >= 1".into()));
        }
        if drift.len() != n {
            return Err(SystemError::Dimension {
                what: "drift field".into(),
                expected: n,
                got: drift.len(),
            });
        }
        if inputs.len() != m {
            return Err(SystemError::Dimension {
                what: "input fields".into(),
                expected: m,
                got: inputs.len(),
            });
        }
        for (i, field) in inputs.iter().enumerate() {
            if field.len() != n {
                return Err(SystemError::Dimension {
                    what: format!("input field {}", i + 1),
                    expected: n,
                    got: field.len(),
                });
            }
        }
        let names = state_names(n);
        check_vars(&drift, &names, "drift field")?;
        for (i, field) in inputs.iter().enumerate() {
            check_vars(field, &names, &format!("input field {}", i + 1))?;
        }
        input_set.validate(m)?;

        let bound_drift: Vec<BoundExpr> = drift
            .iter()
            .map(|e| e.bind(&names))
            .collect::<Result<_, _>>()?;
        let bound_inputs: Vec<Vec<BoundExpr>> = inputs
            .iter()
            .map(|field| field.iter().map(|e| e.bind(&names)).collect())
            .collect::<Result<_, _>>()?;

        Ok(Self {
            n,
            m,
            drift,
            inputs,
            input_set,
            bound_drift: bound_drift.into(),
            bound_inputs: bound_inputs.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input_set
    }

    pub fn drift_exprs(&self) -> &[Expr] {
        &self.drift
    }

    pub fn input_exprs(&self) -> &[Vec<Expr>] {
        &self.inputs
    }

    /// Drift X₀ evaluated at p.
    pub fn drift_at(&self, p: &[f64]) -> Result<Vec<f64>, SystemError> {
        self.check_state(p)?;
        self.bound_drift
            .iter()
            .map(|e| e.eval(p))
            .collect::<Result<_, _>>()
            .map_err(|source| SystemError::Eval {
                p: p.to_vec(),
                u: None,
                source,
            })
    }

    /// F(p, u) = X₀(p) + Σᵢ uⁱ Xᵢ(p). `u` is not checked against the input
    /// set — callers enforce membership where the analysis requires it.
    pub fn eval_dynamics(&self, p: &[f64], u: &[f64]) -> Result<Vec<f64>, SystemError> {
        self.check_state(p)?;
        if u.len() != self.m {
            return Err(SystemError::Dimension {
                what: "input".into(),
                expected: self.m,
                got: u.len(),
            });
        }
        let wrap = |source: DslError| SystemError::Eval {
            p: p.to_vec(),
            u: Some(u.to_vec()),
            source,
        };
        let mut out = Vec::with_capacity(self.n);
        for k in 0..self.n {
            let mut v = self.bound_drift[k].eval(p).map_err(wrap)?;
            for (i, field) in self.bound_inputs.iter().enumerate() {
                v += u[i] * field[k].eval(p).map_err(wrap)?;
            }
            out.push(v);
        }
        Ok(out)
    }

    /// The n×m matrix G(p) whose columns are the input fields Xᵢ(p), so that
    /// F(p,u) = X₀(p) + G(p)·u.
    pub fn input_matrix(&self, p: &[f64]) -> Result<DMatrix<f64>, SystemError> {
        self.check_state(p)?;
        let mut g = DMatrix::zeros(self.n, self.m);
        for (i, field) in self.bound_inputs.iter().enumerate() {
            for k in 0..self.n {
                g[(k, i)] = field[k].eval(p).map_err(|source| SystemError::Eval {
                    p: p.to_vec(),
                    u: None,
                    source,
                })?;
            }
        }
        Ok(g)
    }

    fn check_state(&self, p: &[f64]) -> Result<(), SystemError> {
        if p.len() != self.n {
            return Err(SystemError::Dimension {
                what: "state".into(),
                expected: self.n,
                got: p.len(),
            });
        }
        Ok(())
    }
}

/// General system ẋ = f(x, u) given componentwise by expressions in
/// `x1..xn, u1..um`.
#[derive(Clone)]
pub struct GeneralSystem {
    n: usize,
    m: usize,
    dynamics: Vec<Expr>,
    input_set: InputSet,
    bound: Arc<[BoundExpr]>,
}

impl fmt::Debug for GeneralSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("input_set", &self.input_set)
            .finish_non_exhaustive()
    }
}

impl GeneralSystem {
    pub fn new(
        n: usize,
        m: usize,
        dynamics: Vec<Expr>,
        input_set: InputSet,
    ) -> Result<Self, SystemError> {
        if n == 0 {
            return Err(SystemError::Invalid("state dimension must be >= 1".into()));
        }
        if dynamics.len() != n {
            return Err(SystemError::Dimension {
                what: "dynamics".into(),
                expected: n,
                got: dynamics.len(),
            });
        }
        let names = state_input_names(n, m);
        check_vars(&dynamics, &names, "dynamics")?;
        input_set.validate(m)?;
        let bound: Vec<BoundExpr> = dynamics
            .iter()
            .map(|e| e.bind(&names))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            n,
            m,
            dynamics,
            input_set,
            bound: bound.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input_set
    }

    pub fn dynamics_exprs(&self) -> &[Expr] {
        &self.dynamics
    }

    pub fn eval_dynamics(&self, p: &[f64], u: &[f64]) -> Result<Vec<f64>, SystemError> {
        if p.len() != self.n {
            return Err(SystemError::Dimension {
                what: "state".into(),
                expected: self.n,
                got: p.len(),
            });
        }
        if u.len() != self.m {
            return Err(SystemError::Dimension {
                what: "input".into(),
                expected: self.m,
                got: u.len(),
            });
        }
        let mut slots = Vec::with_capacity(self.n + self.m);
        slots.extend_from_slice(p);
        slots.extend_from_slice(u);
        self.bound
            .iter()
            .map(|e| e.eval(&slots))
            .collect::<Result<_, _>>()
            .map_err(|source| SystemError::Eval {
                p: p.to_vec(),
                u: Some(u.to_vec()),
                source,
            })
    }
}

/// Either flavor of system; analyses that need affine structure require the
/// `Affine` variant and report an error otherwise.
#[derive(Debug, Clone)]
pub enum System {
    Affine(ControlAffineSystem),
    General(GeneralSystem),
}

impl System {
    pub fn n(&self) -> usize {
        match self {
            System::Affine(s) => s.n(),
            System::General(s) => s.n(),
        }
    }

    pub fn m(&self) -> usize {
        match self {
            System::Affine(s) => s.m(),
            System::General(s) => s.m(),
        }
    }

    pub fn input_set(&self) -> &InputSet {
        match self {
            System::Affine(s) => s.input_set(),
            System::General(s) => s.input_set(),
        }
    }

    pub fn eval_dynamics(&self, p: &[f64], u: &[f64]) -> Result<Vec<f64>, SystemError> {
        match self {
            System::Affine(s) => s.eval_dynamics(p, u),
            System::General(s) => s.eval_dynamics(p, u),
        }
    }

    pub fn as_affine(&self) -> Option<&ControlAffineSystem> {
        match self {
            System::Affine(s) => Some(s),
            System::General(_) => None,
        }
    }

    /// The closed-loop vector field p ↦ F(p, κ(p)).
    ///
    /// Continuity of the result is the caller's modeling responsibility: the
    /// type system does not require κ to be continuous.
    pub fn closed_loop(&self, k: &Controller) -> VectorField {
        let sys = self.clone();
        let ctrl = k.clone();
        VectorField::new(
            self.n(),
            format!("closed loop of {}-state system", self.n()),
            move |p| {
                let u = ctrl.eval(p)?;
                sys.eval_dynamics(p, &u)
            },
        )
    }
}

/// A state-feedback controller κ: ℝⁿ → ℝᵐ.
#[derive(Clone)]
pub enum Controller {
    /// m expressions in the state variables.
    Expression(Vec<Expr>),
    /// A pointwise solver callback (e.g. a quadratic-program filter).
    /// Implementations must be stateless or internally synchronized.
    Tabulated {
        m: usize,
        description: String,
        f: Arc<dyn Fn(&[f64]) -> Result<Vec<f64>, SystemError> + Send + Sync>,
    },
    /// Partition-of-unity blend of constant inputs over ball patches.
    Blended(BlendedController),
}

impl fmt::Debug for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Controller::Expression(es) => f.debug_tuple("Expression").field(&es.len()).finish(),
            Controller::Tabulated { m, description, .. } => f
                .debug_struct("Tabulated")
                .field("m", m)
                .field("description", description)
                .finish(),
            Controller::Blended(b) => f.debug_tuple("Blended").field(b).finish(),
        }
    }
}

impl Controller {
    pub fn from_exprs(exprs: Vec<Expr>) -> Self {
        Controller::Expression(exprs)
    }

    /// Output dimension m.
    pub fn m(&self) -> usize {
        match self {
            Controller::Expression(es) => es.len(),
            Controller::Tabulated { m, .. } => *m,
            Controller::Blended(b) => b.input_dim(),
        }
    }

    pub fn eval(&self, p: &[f64]) -> Result<Vec<f64>, SystemError> {
        match self {
            Controller::Expression(es) => {
                let b = Binding::states(p);
                es.iter()
                    .map(|e| e.eval(&b))
                    .collect::<Result<_, _>>()
                    .map_err(|err| SystemError::Controller {
                        p: p.to_vec(),
                        reason: err.to_string(),
                    })
            }
            Controller::Tabulated { f, .. } => f(p),
            Controller::Blended(b) => b.eval(p).map_err(|reason| SystemError::Controller {
                p: p.to_vec(),
                reason,
            }),
        }
    }
}

/// A vector field on ℝⁿ as an evaluable closure, with combinators used to
/// form perturbed and closed-loop fields.
#[derive(Clone)]
pub struct VectorField {
    n: usize,
    description: String,
    f: Arc<dyn Fn(&[f64]) -> Result<Vec<f64>, SystemError> + Send + Sync>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("n", &self.n)
            .field("description", &self.description)
            .finish_non_exhaustive()
    }
}

impl VectorField {
    pub fn new(
        n: usize,
        description: impl Into<String>,
        f: impl Fn(&[f64]) -> Result<Vec<f64>, SystemError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            description: description.into(),
            f: Arc::new(f),
        }
    }

    /// Builds a field from n componentwise expressions in `x1..xn`.
    pub fn from_exprs(exprs: &[Expr]) -> Result<Self, SystemError> {
        let n = exprs.len();
        if n == 0 {
            return Err(SystemError::Invalid("empty vector field".into()));
        }
        let names = state_names(n);
        check_vars(exprs, &names, "vector field")?;
        let bound: Vec<BoundExpr> = exprs
            .iter()
            .map(|e| e.bind(&names))
            .collect::<Result<_, _>>()?;
        let desc = exprs
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        Ok(Self::new(n, format!("({desc})"), move |p| {
            bound
                .iter()
                .map(|e| e.eval(p))
                .collect::<Result<_, _>>()
                .map_err(|source| SystemError::Eval {
                    p: p.to_vec(),
                    u: None,
                    source,
                })
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn eval(&self, p: &[f64]) -> Result<Vec<f64>, SystemError> {
        if p.len() != self.n {
            return Err(SystemError::Dimension {
                what: "state".into(),
                expected: self.n,
                got: p.len(),
            });
        }
        (self.f)(p)
    }

    /// The field X + c·Y.
    pub fn add_scaled(&self, other: &VectorField, c: f64) -> VectorField {
        let a = self.clone();
        let b = other.clone();
        VectorField::new(
            self.n,
            format!("{} + {c}*({})", a.description, b.description),
            move |p| {
                let mut x = a.eval(p)?;
                let y = b.eval(p)?;
                for i in 0..x.len() {
                    x[i] += c * y[i];
                }
                Ok(x)
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;
    use proptest::prelude::*;

    fn exprs(list: &[&str]) -> Vec<Expr> {
        list.iter().map(|s| parse(s).unwrap()).collect()
    }

    /// ẋ = (u¹, u², x²u¹ − x¹u²) as a control-affine system.
    pub(crate) fn nonholonomic(input_set: InputSet) -> ControlAffineSystem {
        ControlAffineSystem::new(
            3,
            2,
            exprs(&["0", "0", "0"]),
            vec![exprs(&["1", "0", "x2"]), exprs(&["0", "1", "-x1"])],
            input_set,
        )
        .unwrap()
    }

    #[test]
    fn nonholonomic_dynamics() {
        let sys = nonholonomic(InputSet::FullSpace { m: 2 });
        let v = sys.eval_dynamics(&[0.0, 0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(v, vec![1.0, 1.0, 0.0]);
        let v = sys.eval_dynamics(&[2.0, 3.0, -1.0], &[1.0, 2.0]).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0 - 4.0]);
    }

    #[test]
    fn unit_disk_dynamics() {
        // ẋ = x + u with u on the unit sphere.
        let sys = ControlAffineSystem::new(
            2,
            2,
            exprs(&["x1", "x2"]),
            vec![exprs(&["1", "0"]), exprs(&["0", "1"])],
            InputSet::Sphere { radius: 1.0 },
        )
        .unwrap();
        let v = sys.eval_dynamics(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(v, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_input_gives_drift() {
        let sys = ControlAffineSystem::new(
            2,
            2,
            exprs(&["x2", "-x1"]),
            vec![exprs(&["1", "0"]), exprs(&["0", "1"])],
            InputSet::FullSpace { m: 2 },
        )
        .unwrap();
        let p = [0.3, -0.7];
        assert_eq!(
            sys.eval_dynamics(&p, &[0.0, 0.0]).unwrap(),
            sys.drift_at(&p).unwrap()
        );
    }

    #[test]
    fn input_matrix_columns() {
        let sys = nonholonomic(InputSet::FullSpace { m: 2 });
        let g = sys.input_matrix(&[5.0, 7.0, 0.0]).unwrap();
        assert_eq!(g.nrows(), 3);
        assert_eq!(g.ncols(), 2);
        assert_eq!(g.column(0).as_slice(), &[1.0, 0.0, 7.0]);
        assert_eq!(g.column(1).as_slice(), &[0.0, 1.0, -5.0]);
    }

    #[test]
    fn satellite_matrix_constant() {
        // Reduced form: ẋ = u₁e₁ + u₂e₂ in ℝ³.
        let sys = ControlAffineSystem::new(
            3,
            2,
            exprs(&["0", "0", "0"]),
            vec![exprs(&["1", "0", "0"]), exprs(&["0", "1", "0"])],
            InputSet::FullSpace { m: 2 },
        )
        .unwrap();
        for p in [[0.0, 0.0, 0.0], [1.0, -2.0, 3.0]] {
            let g = sys.input_matrix(&p).unwrap();
            assert_eq!(g.column(0).as_slice(), &[1.0, 0.0, 0.0]);
            assert_eq!(g.column(1).as_slice(), &[0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn empty_input_matrix() {
        let sys =
            ControlAffineSystem::new(1, 0, exprs(&["-x1"]), vec![], InputSet::FullSpace { m: 0 })
                .unwrap();
        let g = sys.input_matrix(&[2.0]).unwrap();
        assert_eq!((g.nrows(), g.ncols()), (1, 0));
        assert_eq!(sys.eval_dynamics(&[2.0], &[]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn closed_loop_matches_substitution() {
        // κ(x) = −x/‖x‖ on the unit-disk system gives x − x/‖x‖.
        let sys = System::Affine(
            ControlAffineSystem::new(
                2,
                2,
                exprs(&["x1", "x2"]),
                vec![exprs(&["1", "0"]), exprs(&["0", "1"])],
                InputSet::Sphere { radius: 1.0 },
            )
            .unwrap(),
        );
        let k = Controller::from_exprs(exprs(&[
            "-x1 / sqrt(x1^2 + x2^2)",
            "-x2 / sqrt(x1^2 + x2^2)",
        ]));
        let field = sys.closed_loop(&k);
        for p in [[0.5, 0.0], [0.6, -0.8], [1.5, 2.0]] {
            let got = field.eval(&p).unwrap();
            let r = norm(&p);
            let want = [p[0] - p[0] / r, p[1] - p[1] / r];
            assert!((got[0] - want[0]).abs() < 1e-15);
            assert!((got[1] - want[1]).abs() < 1e-15);
            // Exactly the eval_dynamics path.
            let u = k.eval(&p).unwrap();
            let direct = sys.eval_dynamics(&p, &u).unwrap();
            assert_eq!(got, direct);
        }
    }

    #[test]
    fn zero_controller_gives_drift() {
        let aff = nonholonomic(InputSet::FullSpace { m: 2 });
        let sys = System::Affine(aff.clone());
        let k = Controller::from_exprs(exprs(&["0", "0"]));
        let field = sys.closed_loop(&k);
        let p = [1.0, 2.0, 3.0];
        assert_eq!(field.eval(&p).unwrap(), aff.drift_at(&p).unwrap());
    }

    #[test]
    fn membership_examples() {
        let sphere = InputSet::Sphere { radius: 1.0 };
        assert!(sphere.membership(&[1.0, 0.0]).inside);
        let m = sphere.membership(&[0.0, 0.0]);
        assert!(!m.inside);
        assert_eq!(m.distance, 1.0);

        let boxed = InputSet::Box {
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
        };
        assert!(boxed.membership(&[0.5, 0.5]).inside);
        assert!(!boxed.membership(&[1.5, 0.5]).inside);
        assert!((boxed.membership(&[1.5, 0.5]).distance - 0.5).abs() < 1e-15);

        let ball = InputSet::Ball { radius: 2.0 };
        assert!(ball.membership(&[1.0, 1.0]).inside);
        assert!(!ball.membership(&[2.0, 2.0]).inside);

        let fin = InputSet::FinitePoints {
            points: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        assert!(fin.membership(&[1.0, 0.0]).inside);
        let m = fin.membership(&[0.5, 0.5]);
        assert!(!m.inside);
        assert!((m.distance - (0.5f64 * 0.5 * 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn projection_onto_sets() {
        let boxed = InputSet::Box {
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
        };
        assert_eq!(boxed.project(&[2.0, 0.5]), vec![1.0, 0.5]);
        let ball = InputSet::Ball { radius: 1.0 };
        let p = ball.project(&[3.0, 4.0]);
        assert!((norm(&p) - 1.0).abs() < 1e-15);
        let sphere = InputSet::Sphere { radius: 2.0 };
        assert_eq!(sphere.project(&[0.0, 0.0]), vec![2.0, 0.0]);
        let fin = InputSet::FinitePoints {
            points: vec![vec![0.0], vec![1.0]],
        };
        assert_eq!(fin.project(&[0.4]), vec![0.0]);
        assert_eq!(fin.project(&[0.6]), vec![1.0]);
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        // Drift uses an input variable.
        let err = ControlAffineSystem::new(
            1,
            1,
            exprs(&["u1"]),
            vec![exprs(&["1"])],
            InputSet::FullSpace { m: 1 },
        )
        .unwrap_err();
        assert!(err.to_string().contains("u1"), "{err}");

        // Input set dimension mismatch.
        assert!(ControlAffineSystem::new(
            1,
            1,
            exprs(&["0"]),
            vec![exprs(&["1"])],
            InputSet::Box {
                lower: vec![0.0, 0.0],
                upper: vec![1.0, 1.0]
            },
        )
        .is_err());

        // Inverted box.
        assert!(InputSet::Box {
            lower: vec![1.0],
            upper: vec![0.0]
        }
        .validate(1)
        .is_err());

        // Empty finite set.
        assert!(InputSet::FinitePoints { points: vec![] }.validate(1).is_err());

        // General system may use u variables.
        assert!(GeneralSystem::new(
            1,
            1,
            exprs(&["sin(u1) - x1"]),
            InputSet::FullSpace { m: 1 }
        )
        .is_ok());
    }

    #[test]
    fn eval_error_carries_context() {
        let sys = GeneralSystem::new(
            1,
            1,
            exprs(&["x1 / u1"]),
            InputSet::FullSpace { m: 1 },
        )
        .unwrap();
        let err = sys.eval_dynamics(&[1.0], &[0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("p=[1.0]"), "{msg}");
        assert!(msg.contains("u=[0.0]"), "{msg}");
    }

    proptest! {
        /// Affine consistency: F(p,u) = X₀(p) + G(p)·u.
        #[test]
        fn affine_consistency(
            px in -3.0..3.0f64, py in -3.0..3.0f64, pz in -3.0..3.0f64,
            u1 in -5.0..5.0f64, u2 in -5.0..5.0f64,
        ) {
            let sys = nonholonomic(InputSet::FullSpace { m: 2 });
            let p = [px, py, pz];
            let u = [u1, u2];
            let direct = sys.eval_dynamics(&p, &u).unwrap();
            let g = sys.input_matrix(&p).unwrap();
            let drift = sys.drift_at(&p).unwrap();
            let gu = &g * nalgebra::DVector::from_column_slice(&u);
            for k in 0..3 {
                prop_assert!((direct[k] - (drift[k] + gu[k])).abs() <= 1e-12);
            }
        }

        /// Linearity in u for affine systems.
        #[test]
        fn linear_in_input(
            px in -2.0..2.0f64, py in -2.0..2.0f64, pz in -2.0..2.0f64,
            u1 in -2.0..2.0f64, u2 in -2.0..2.0f64,
            v1 in -2.0..2.0f64, v2 in -2.0..2.0f64,
            a in -3.0..3.0f64, b in -3.0..3.0f64,
        ) {
            let sys = nonholonomic(InputSet::FullSpace { m: 2 });
            let p = [px, py, pz];
            let u = [u1, u2];
            let v = [v1, v2];
            let au_bv = [a * u1 + b * v1, a * u2 + b * v2];
            let f0 = sys.eval_dynamics(&p, &[0.0, 0.0]).unwrap();
            let fu = sys.eval_dynamics(&p, &u).unwrap();
            let fv = sys.eval_dynamics(&p, &v).unwrap();
            let fw = sys.eval_dynamics(&p, &au_bv).unwrap();
            for k in 0..3 {
                let lhs = fw[k] - f0[k];
                let rhs = a * (fu[k] - f0[k]) + b * (fv[k] - f0[k]);
                prop_assert!((lhs - rhs).abs() <= 1e-12,
                    "component {}: {} vs {}", k, lhs, rhs);
            }
        }
    }
}

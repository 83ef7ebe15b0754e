//! Solvability obstructions: can the dynamics produce a prescribed velocity
//! F(p, u) = Z_p somewhere on the safe set, with u ranging over the input
//! set? Exact span tests handle unconstrained affine systems; bounded input
//! sets get a constrained search. Verdicts aggregate pointwise results over
//! samples of C (or an inflated neighborhood) and over a shrinking scale
//! ladder for perturbation families.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dsl::{BinOp, DslError, Expr};
use crate::flow::{self, FlowError};
use crate::geometry::{
    boundary_sample, build_cubical_complex, AxisBox, CubicalComplex, GeometryError, SafeSet,
};
use crate::opt::{golden_section, levenberg_marquardt, projected_gradient};
use crate::system::{norm, ControlAffineSystem, InputSet, System, SystemError};

/// Relative tolerance under which a residual counts as an exact solve:
/// tol = TOL_SOLVE_REL · (1 + ‖z‖).
pub const TOL_SOLVE_REL: f64 = 1e-7;
/// Residuals above GAP_FACTOR · tol are Unsolvable; the band between the two
/// thresholds is reported Inconclusive rather than forced to either side.
pub const GAP_FACTOR: f64 = 100.0;
/// Singular values below this fraction of σ_max are treated as zero.
const SVD_CUTOFF_REL: f64 = 1e-10;
/// Family scales run over {2⁻¹, …, 2⁻¹⁰}.
const LADDER_RUNGS: u32 = 10;
/// Consecutive solvable rungs needed before a family check settles on
/// NotViolated.
const CONFIRMATION_RUNGS: usize = 3;
const MULTISTART_COUNT: usize = 20;
const MULTISTART_SEED: u64 = 17;
const SEARCH_MAX_ITER: usize = 600;
const SPHERE_GRID_2D: usize = 256;
const SPHERE_AZIMUTH_GRID: usize = 64;
const SPHERE_POLAR_GRID: usize = 33;
const GOLDEN_ITERS: usize = 80;
const LM_POLISH_ITERS: usize = 60;
/// Boundary samples used both for admissibility screening and as search
/// points.
const BOUNDARY_POINTS: usize = 100;
/// Random interior search points per unit of n².
const RANDOM_INTERIOR_PER_N2: usize = 10;
const FAMILY_ZERO_SAMPLES: usize = 50;
const FAMILY_ZERO_SEED: u64 = 1;
const FAMILY_ZERO_TOL: f64 = 1e-12;
/// Neighborhood inflation for the flow-out region: C̃ = {h ≥ -t₀}.
const NEIGHBORHOOD_T0: f64 = 0.05;
const NEIGHBORHOOD_T1: f64 = 0.1;
/// Equilibrium check radii run over ball_radius · 2⁻ᵏ, k = 0..BROCKETT_RUNGS-1.
const BROCKETT_RUNGS: u32 = 9;
const BROCKETT_GRID_PER_AXIS: usize = 9;
const BROCKETT_REFINE_STARTS: usize = 3;
/// Residual spread below which the pointwise residual is treated as
/// state-independent and re-sampled on a refined grid.
const STATE_INDEPENDENT_REL: f64 = 1e-9;
const REFINED_GRID_FACTOR: usize = 5;
const REFINED_GRID_CAP: usize = 500_000;
/// dh·Z ≤ tol · (1 + ‖Z‖·‖grad h‖) passes as "outward or tangent".
const ADMISSIBILITY_TOL_REL: f64 = 1e-8;
const LINEARITY_PROBES: usize = 4;
const LINEARITY_TOL_REL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ObstructionError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(
        "perturbation field is not inward-admissible: dh·Z = {pairing:.6e} > {tol:.3e} at {point:?}"
    )]
    InadmissiblePerturbation {
        pairing: f64,
        tol: f64,
        point: Vec<f64>,
    },
    #[error("input set unsupported here: {0}")]
    UnsupportedInputSet(String),
    #[error("perturbation family does not vanish at scale 0: ‖Z_0‖ = {norm:.3e} at {point:?}")]
    FamilyNotVanishing { norm: f64, point: Vec<f64> },
}

/// A continuous perturbation field Z, componentwise expressions in x1..xn.
/// With a scale parameter the field is a family Z_ε; fixing the scale
/// recovers a plain field.
#[derive(Debug, Clone)]
pub struct PerturbationField {
    components: Vec<Expr>,
    scale_param: Option<String>,
    description: String,
    admissibility_verified: bool,
}

impl PerturbationField {
    pub fn new(
        components: Vec<Expr>,
        scale_param: Option<String>,
        description: impl Into<String>,
    ) -> Result<Self, ObstructionError> {
        if components.is_empty() {
            return Err(ObstructionError::Precondition(
                "perturbation field needs at least one component".into(),
            ));
        }
        let n = components.len();
        for (i, e) in components.iter().enumerate() {
            for v in e.free_vars() {
                let state_ok = v
                    .strip_prefix('x')
                    .and_then(|s| s.parse::<usize>().ok())
                    .map(|k| k >= 1 && k <= n)
                    .unwrap_or(false);
                if !state_ok && scale_param.as_deref() != Some(v) {
                    return Err(ObstructionError::Precondition(format!(
                        "perturbation component {} uses unknown variable `{v}`",
                        i + 1
                    )));
                }
            }
        }
        Ok(Self {
            components,
            scale_param,
            description: description.into(),
            admissibility_verified: false,
        })
    }

    /// The family ε·(given components), with scale parameter `eps`.
    pub fn scaled_family(
        components: Vec<Expr>,
        description: impl Into<String>,
    ) -> Result<Self, ObstructionError> {
        let scaled = components
            .into_iter()
            .map(|e| {
                Expr::Binary(
                    BinOp::Mul,
                    Box::new(Expr::Var("eps".into())),
                    Box::new(e),
                )
            })
            .collect();
        Self::new(scaled, Some("eps".into()), description)
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn scale_param(&self) -> Option<&str> {
        self.scale_param.as_deref()
    }

    pub fn is_family(&self) -> bool {
        self.scale_param.is_some()
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    /// Whether dh·Z ≤ 0 on ∂C has been checked (see [`verify_admissibility`]).
    pub fn admissibility_verified(&self) -> bool {
        self.admissibility_verified
    }

    /// A fast componentwise evaluator. Families need `scale`; plain fields
    /// ignore it.
    pub fn evaluator(
        &self,
        scale: Option<f64>,
    ) -> Result<impl Fn(&[f64]) -> Result<Vec<f64>, DslError> + Send + Sync, ObstructionError>
    {
        let n = self.n();
        let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        let needs_scale = self.scale_param.is_some();
        if let Some(name) = &self.scale_param {
            names.push(name.clone());
        }
        if needs_scale && scale.is_none() {
            return Err(ObstructionError::Precondition(
                "a scale value is required to evaluate a perturbation family".into(),
            ));
        }
        let bound: Vec<_> = self
            .components
            .iter()
            .map(|e| e.bind(&names))
            .collect::<Result<_, _>>()?;
        let eps = scale.unwrap_or(0.0);
        Ok(move |p: &[f64]| {
            let mut vals = Vec::with_capacity(n + 1);
            vals.extend_from_slice(&p[..n]);
            if needs_scale {
                vals.push(eps);
            }
            bound.iter().map(|b| b.eval(&vals)).collect()
        })
    }
}

/// Checks dh·Z ≤ tol at boundary samples of C and returns a copy of the
/// field with the admissibility flag set. Families are rejected: the sign
/// condition applies to fixed fields only.
pub fn verify_admissibility(
    s: &SafeSet,
    zf: &PerturbationField,
    samples: usize,
) -> Result<PerturbationField, ObstructionError> {
    if zf.is_family() {
        return Err(ObstructionError::Precondition(
            "admissibility applies to fixed fields, not scale families".into(),
        ));
    }
    let eval = zf.evaluator(None)?;
    let bs = boundary_sample(s, samples)?;
    for p in &bs.points {
        let g = s.grad_at(p)?;
        let zv = eval(p)?;
        let pairing: f64 = g.iter().zip(&zv).map(|(a, b)| a * b).sum();
        let tol = ADMISSIBILITY_TOL_REL * (1.0 + norm(&zv) * norm(&g));
        if pairing > tol {
            return Err(ObstructionError::InadmissiblePerturbation {
                pairing,
                tol,
                point: p.clone(),
            });
        }
    }
    let mut out = zf.clone();
    out.admissibility_verified = true;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status")]
pub enum SolvabilityStatus {
    Solvable {
        p: Vec<f64>,
        u: Vec<f64>,
        residual: f64,
    },
    Unsolvable {
        min_residual: f64,
        argmin_p: Vec<f64>,
    },
    Inconclusive {
        best_residual: f64,
        argmin_p: Vec<f64>,
        note: String,
    },
}

impl SolvabilityStatus {
    pub fn residual(&self) -> f64 {
        match self {
            SolvabilityStatus::Solvable { residual, .. } => *residual,
            SolvabilityStatus::Unsolvable { min_residual, .. } => *min_residual,
            SolvabilityStatus::Inconclusive { best_residual, .. } => *best_residual,
        }
    }

    pub fn is_solvable(&self) -> bool {
        matches!(self, SolvabilityStatus::Solvable { .. })
    }

    pub fn is_unsolvable(&self) -> bool {
        matches!(self, SolvabilityStatus::Unsolvable { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveMethod {
    ExactSpan,
    ConstrainedSearch,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolvabilityResult {
    pub status: SolvabilityStatus,
    /// Description of the region the search ranged over.
    pub region: String,
    pub method: SolveMethod,
}

/// Residual threshold for an exact solve at target velocity z.
pub fn tol_solve(z: &[f64]) -> f64 {
    TOL_SOLVE_REL * (1.0 + norm(z))
}

/// Outcome of one pointwise search: best input, its residual, whether the
/// search ran to convergence, and which method produced it.
#[derive(Debug, Clone)]
struct PointSolve {
    u: Vec<f64>,
    residual: f64,
    converged: bool,
    method: SolveMethod,
}

fn classify(ps: &PointSolve, p: &[f64], tol: f64) -> SolvabilityStatus {
    if ps.residual <= tol {
        SolvabilityStatus::Solvable {
            p: p.to_vec(),
            u: ps.u.clone(),
            residual: ps.residual,
        }
    } else if !ps.converged {
        SolvabilityStatus::Inconclusive {
            best_residual: ps.residual,
            argmin_p: p.to_vec(),
            note: "search stopped before convergence".into(),
        }
    } else if ps.residual > GAP_FACTOR * tol {
        SolvabilityStatus::Unsolvable {
            min_residual: ps.residual,
            argmin_p: p.to_vec(),
        }
    } else {
        SolvabilityStatus::Inconclusive {
            best_residual: ps.residual,
            argmin_p: p.to_vec(),
            note: format!(
                "residual {:.3e} falls between the solve tolerance {:.3e} and {:.0}x that",
                ps.residual, tol, GAP_FACTOR
            ),
        }
    }
}

fn check_point_dims(n: usize, p: &[f64], z: &[f64]) -> Result<(), ObstructionError> {
    if p.len() != n || z.len() != n {
        return Err(ObstructionError::Precondition(format!(
            "state and target must both have dimension {n} (got {} and {})",
            p.len(),
            z.len()
        )));
    }
    Ok(())
}

/// Least-squares solve of G(p)·u = z − drift(p) for an unconstrained affine
/// system. The residual is exact up to the SVD rank cutoff, so the verdict
/// never depends on search luck.
pub fn span_solvability(
    sys: &ControlAffineSystem,
    p: &[f64],
    z: &[f64],
) -> Result<SolvabilityResult, ObstructionError> {
    if !matches!(sys.input_set(), InputSet::FullSpace { .. }) {
        return Err(ObstructionError::Precondition(
            "span solvability needs an unconstrained input set; use constrained_solvability"
                .into(),
        ));
    }
    check_point_dims(sys.n(), p, z)?;
    let ps = affine_least_squares(sys, p, z)?;
    let status = classify(&ps, p, tol_solve(z));
    Ok(SolvabilityResult {
        status,
        region: single_point_region(p),
        method: SolveMethod::ExactSpan,
    })
}

/// Minimizes ‖F(p,u) − z‖ over a bounded input set: enumeration for finite
/// sets, an exact regularized least-squares path for affine systems with
/// ball inputs, angular parametrizations for spheres (m ≤ 3), and
/// multi-start projected gradient otherwise.
pub fn constrained_solvability(
    sys: &System,
    p: &[f64],
    z: &[f64],
) -> Result<SolvabilityResult, ObstructionError> {
    if matches!(sys.input_set(), InputSet::FullSpace { .. }) {
        return Err(ObstructionError::Precondition(
            "constrained solvability needs a bounded input set; use span_solvability".into(),
        ));
    }
    check_point_dims(sys.n(), p, z)?;
    let ps = constrained_best(sys, p, z)?;
    let status = classify(&ps, p, tol_solve(z));
    Ok(SolvabilityResult {
        status,
        region: single_point_region(p),
        method: SolveMethod::ConstrainedSearch,
    })
}

/// Dispatches to the right solver for the system's input set.
pub fn solve_at(
    sys: &System,
    p: &[f64],
    z: &[f64],
) -> Result<SolvabilityResult, ObstructionError> {
    check_point_dims(sys.n(), p, z)?;
    let ps = best_input(sys, p, z)?;
    let status = classify(&ps, p, tol_solve(z));
    Ok(SolvabilityResult {
        status,
        region: single_point_region(p),
        method: ps.method,
    })
}

fn single_point_region(p: &[f64]) -> String {
    format!("single state p = {p:?}")
}

fn best_input(sys: &System, p: &[f64], z: &[f64]) -> Result<PointSolve, ObstructionError> {
    match sys.input_set() {
        InputSet::FullSpace { .. } => match sys {
            System::Affine(aff) => affine_least_squares(aff, p, z),
            System::General(_) => unconstrained_general(sys, p, z),
        },
        _ => constrained_best(sys, p, z),
    }
}

fn constrained_best(sys: &System, p: &[f64], z: &[f64]) -> Result<PointSolve, ObstructionError> {
    match sys.input_set() {
        InputSet::FinitePoints { points } => finite_best(sys, p, z, points),
        InputSet::Box { lower, upper } => {
            let (lower, upper) = (lower.clone(), upper.clone());
            multistart_search(sys, p, z, &move |u| {
                (0..u.len()).map(|i| u[i].clamp(lower[i], upper[i])).collect()
            })
        }
        InputSet::Ball { radius } => {
            if let Some(aff) = sys.as_affine() {
                ball_affine_exact(aff, p, z, *radius)
            } else {
                let radius = *radius;
                multistart_search(sys, p, z, &move |u| {
                    let r = norm(u);
                    if r <= radius {
                        u.to_vec()
                    } else {
                        u.iter().map(|v| v * radius / r).collect()
                    }
                })
            }
        }
        InputSet::Sphere { radius } => sphere_search(sys, p, z, *radius),
        InputSet::FullSpace { .. } => unreachable!("full space handled by best_input"),
    }
}

fn affine_least_squares(
    sys: &ControlAffineSystem,
    p: &[f64],
    z: &[f64],
) -> Result<PointSolve, ObstructionError> {
    let drift = sys.drift_at(p)?;
    let rhs = DVector::from_iterator(z.len(), z.iter().zip(&drift).map(|(a, b)| a - b));
    if sys.m() == 0 {
        return Ok(PointSolve {
            u: vec![],
            residual: rhs.norm(),
            converged: true,
            method: SolveMethod::ExactSpan,
        });
    }
    let g = sys.input_matrix(p)?;
    let (u, residual) = svd_least_squares(&g, &rhs);
    Ok(PointSolve {
        u,
        residual,
        converged: true,
        method: SolveMethod::ExactSpan,
    })
}

fn svd_least_squares(g: &DMatrix<f64>, rhs: &DVector<f64>) -> (Vec<f64>, f64) {
    let svd = g.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let u = svd
        .solve(rhs, SVD_CUTOFF_REL * sigma_max)
        .expect("SVD factors were requested");
    let residual = (g * &u - rhs).norm();
    (u.iter().copied().collect(), residual)
}

/// Exact minimizer of ‖G·u − (z − drift)‖ subject to ‖u‖ ≤ radius: the
/// unconstrained least-squares point when it fits, otherwise the boundary
/// solution u(λ) = V diag(σᵢ/(σᵢ²+λ)) Uᵀ rhs with λ found by bisection on
/// the strictly decreasing map λ ↦ ‖u(λ)‖.
fn ball_affine_exact(
    sys: &ControlAffineSystem,
    p: &[f64],
    z: &[f64],
    radius: f64,
) -> Result<PointSolve, ObstructionError> {
    let drift = sys.drift_at(p)?;
    let rhs = DVector::from_iterator(z.len(), z.iter().zip(&drift).map(|(a, b)| a - b));
    if sys.m() == 0 {
        return Ok(PointSolve {
            u: vec![],
            residual: rhs.norm(),
            converged: true,
            method: SolveMethod::ConstrainedSearch,
        });
    }
    let g = sys.input_matrix(p)?;
    let svd = g.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let u_ls = svd
        .solve(&rhs, SVD_CUTOFF_REL * sigma_max)
        .expect("SVD factors were requested");
    if u_ls.norm() <= radius {
        let residual = (&g * &u_ls - &rhs).norm();
        return Ok(PointSolve {
            u: u_ls.iter().copied().collect(),
            residual,
            converged: true,
            method: SolveMethod::ConstrainedSearch,
        });
    }
    let ut_rhs = svd.u.as_ref().expect("SVD factors were requested").transpose() * &rhs;
    let sv = &svd.singular_values;
    let norm_at = |lam: f64| -> f64 {
        sv.iter()
            .zip(ut_rhs.iter())
            .map(|(s, c)| {
                let w = s * c / (s * s + lam);
                w * w
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut lo = 0.0;
    let mut hi = sigma_max * sigma_max + 1.0;
    while norm_at(hi) > radius {
        hi *= 4.0;
        if !hi.is_finite() {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_at(mid) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lam = 0.5 * (lo + hi);
    let mut w = ut_rhs.clone();
    for i in 0..w.len() {
        w[i] *= sv[i] / (sv[i] * sv[i] + lam);
    }
    let v_t = svd.v_t.as_ref().expect("SVD factors were requested");
    let mut u = v_t.transpose() * w;
    let un = u.norm();
    if un > 0.0 {
        u *= radius / un;
    }
    let residual = (&g * &u - &rhs).norm();
    Ok(PointSolve {
        u: u.iter().copied().collect(),
        residual,
        converged: true,
        method: SolveMethod::ConstrainedSearch,
    })
}

fn finite_best(
    sys: &System,
    p: &[f64],
    z: &[f64],
    points: &[Vec<f64>],
) -> Result<PointSolve, ObstructionError> {
    if points.is_empty() {
        return Err(ObstructionError::Precondition(
            "finite input set has no points".into(),
        ));
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for u in points {
        let r = residual_at(sys, p, u, z)?;
        if best.as_ref().map(|(_, br)| r < *br).unwrap_or(true) {
            best = Some((u.clone(), r));
        }
    }
    let (u, residual) = best.unwrap();
    Ok(PointSolve {
        u,
        residual,
        converged: true,
        method: SolveMethod::ConstrainedSearch,
    })
}

fn residual_at(sys: &System, p: &[f64], u: &[f64], z: &[f64]) -> Result<f64, ObstructionError> {
    let f = sys.eval_dynamics(p, u)?;
    Ok(f.iter()
        .zip(z)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Multi-start projected gradient on the squared residual. The converged
/// flag is the conjunction over starts, so a run that exhausts its budget
/// surfaces as Inconclusive instead of a silent verdict.
fn multistart_search(
    sys: &System,
    p: &[f64],
    z: &[f64],
    project: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
) -> Result<PointSolve, ObstructionError> {
    let m = sys.m();
    let objective = |u: &[f64]| -> Result<f64, SystemError> {
        let f = sys.eval_dynamics(p, u)?;
        Ok(f.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
    };
    let scale = 1.0 + norm(z);
    let mut rng = ChaCha8Rng::seed_from_u64(MULTISTART_SEED);
    let mut starts = vec![vec![0.0; m]];
    while starts.len() < MULTISTART_COUNT {
        starts.push((0..m).map(|_| rng.random_range(-scale..scale)).collect());
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut all_converged = true;
    for s0 in &starts {
        let (u, fsq, converged) =
            projected_gradient(&objective, project, s0, SEARCH_MAX_ITER)?;
        all_converged &= converged;
        if best.as_ref().map(|(_, bf)| fsq < *bf).unwrap_or(true) {
            best = Some((u, fsq));
        }
    }
    let (u, fsq) = best.unwrap();
    Ok(PointSolve {
        u,
        residual: fsq.max(0.0).sqrt(),
        converged: all_converged,
        method: SolveMethod::ConstrainedSearch,
    })
}

fn sphere_search(
    sys: &System,
    p: &[f64],
    z: &[f64],
    radius: f64,
) -> Result<PointSolve, ObstructionError> {
    match sys.m() {
        1 => {
            let mut best: Option<(Vec<f64>, f64)> = None;
            for u in [vec![radius], vec![-radius]] {
                let r = residual_at(sys, p, &u, z)?;
                if best.as_ref().map(|(_, br)| r < *br).unwrap_or(true) {
                    best = Some((u, r));
                }
            }
            let (u, residual) = best.unwrap();
            Ok(PointSolve {
                u,
                residual,
                converged: true,
                method: SolveMethod::ConstrainedSearch,
            })
        }
        2 => sphere_search_2d(sys, p, z, radius),
        3 => sphere_search_3d(sys, p, z, radius),
        m => Err(ObstructionError::UnsupportedInputSet(format!(
            "sphere inputs with m = {m}; angular search covers m <= 3"
        ))),
    }
}

fn sphere_search_2d(
    sys: &System,
    p: &[f64],
    z: &[f64],
    radius: f64,
) -> Result<PointSolve, ObstructionError> {
    let u_of = |theta: f64| vec![radius * theta.cos(), radius * theta.sin()];
    let step = std::f64::consts::TAU / SPHERE_GRID_2D as f64;
    let mut best_theta = 0.0;
    let mut best_r = f64::INFINITY;
    for k in 0..SPHERE_GRID_2D {
        let theta = k as f64 * step;
        let r = residual_at(sys, p, &u_of(theta), z)?;
        if r < best_r {
            best_r = r;
            best_theta = theta;
        }
    }
    let f = |theta: f64| -> f64 {
        residual_at(sys, p, &u_of(theta), z).unwrap_or(f64::INFINITY)
    };
    let theta = golden_section(&f, best_theta - step, best_theta + step, GOLDEN_ITERS);
    let (theta, residual) = if f(theta) <= best_r {
        (theta, f(theta))
    } else {
        (best_theta, best_r)
    };
    Ok(PointSolve {
        u: u_of(theta),
        residual,
        converged: true,
        method: SolveMethod::ConstrainedSearch,
    })
}

fn sphere_search_3d(
    sys: &System,
    p: &[f64],
    z: &[f64],
    radius: f64,
) -> Result<PointSolve, ObstructionError> {
    let u_of = |a: &[f64]| {
        let (theta, phi) = (a[0], a[1]);
        vec![
            radius * phi.sin() * theta.cos(),
            radius * phi.sin() * theta.sin(),
            radius * phi.cos(),
        ]
    };
    let mut best = (vec![0.0, 0.0], f64::INFINITY);
    for i in 0..SPHERE_AZIMUTH_GRID {
        let theta = std::f64::consts::TAU * i as f64 / SPHERE_AZIMUTH_GRID as f64;
        for j in 0..SPHERE_POLAR_GRID {
            let phi = std::f64::consts::PI * j as f64 / (SPHERE_POLAR_GRID - 1) as f64;
            let r = residual_at(sys, p, &u_of(&[theta, phi]), z)?;
            if r < best.1 {
                best = (vec![theta, phi], r);
            }
        }
    }
    let resid_vec = |a: &[f64]| -> Result<Vec<f64>, SystemError> {
        let f = sys.eval_dynamics(p, &u_of(a))?;
        Ok(f.iter().zip(z).map(|(x, y)| x - y).collect())
    };
    let (angles, polished) = levenberg_marquardt(&resid_vec, &best.0, 0.0, LM_POLISH_ITERS)?;
    let (angles, residual) = if polished <= best.1 {
        (angles, polished)
    } else {
        (best.0, best.1)
    };
    Ok(PointSolve {
        u: u_of(&angles),
        residual,
        converged: true,
        method: SolveMethod::ConstrainedSearch,
    })
}

/// Full-space search for systems that are not declared control-affine. If
/// the dynamics prove numerically affine in u at p, the exact span path is
/// used; otherwise multi-start descent.
fn unconstrained_general(
    sys: &System,
    p: &[f64],
    z: &[f64],
) -> Result<PointSolve, ObstructionError> {
    if let Some((drift, g)) = probe_linear_inputs(sys, p)? {
        let rhs = DVector::from_iterator(z.len(), z.iter().zip(&drift).map(|(a, b)| a - b));
        if sys.m() == 0 {
            return Ok(PointSolve {
                u: vec![],
                residual: rhs.norm(),
                converged: true,
                method: SolveMethod::ExactSpan,
            });
        }
        let (u, residual) = svd_least_squares(&g, &rhs);
        return Ok(PointSolve {
            u,
            residual,
            converged: true,
            method: SolveMethod::ExactSpan,
        });
    }
    multistart_search(sys, p, z, &|u: &[f64]| u.to_vec())
}

/// Probes whether u ↦ F(p,u) is affine by superposition against the column
/// map assembled from unit inputs. Returns drift and input matrix on
/// success.
fn probe_linear_inputs(
    sys: &System,
    p: &[f64],
) -> Result<Option<(Vec<f64>, DMatrix<f64>)>, ObstructionError> {
    let n = sys.n();
    let m = sys.m();
    let f0 = sys.eval_dynamics(p, &vec![0.0; m])?;
    let mut g = DMatrix::zeros(n, m);
    for j in 0..m {
        let mut ej = vec![0.0; m];
        ej[j] = 1.0;
        let fj = sys.eval_dynamics(p, &ej)?;
        for i in 0..n {
            g[(i, j)] = fj[i] - f0[i];
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(MULTISTART_SEED);
    for _ in 0..LINEARITY_PROBES {
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fa = sys.eval_dynamics(p, &a)?;
        let ga = &g * DVector::from_column_slice(&a);
        let scale = 1.0 + norm(&fa) + norm(&f0);
        for i in 0..n {
            if (fa[i] - f0[i] - ga[i]).abs() > LINEARITY_TOL_REL * scale {
                return Ok(None);
            }
        }
    }
    Ok(Some((f0, g)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Theorem {
    T3,
    T4,
    T5,
    Cor1,
    Brockett,
}

impl fmt::Display for Theorem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Theorem::T3 => "T3",
            Theorem::T4 => "T4",
            Theorem::T5 => "T5",
            Theorem::Cor1 => "Cor1",
            Theorem::Brockett => "Brockett",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolvingPair {
    pub p: Vec<f64>,
    pub u: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind")]
pub enum Outcome {
    /// Every required solvability attempt came back Unsolvable: the
    /// necessary condition fails, so no object of the checked kind exists.
    Violated {
        witness: String,
        witness_vector: Option<Vec<f64>>,
        evidence: String,
    },
    /// A solving pair was exhibited. This does not certify existence of a
    /// CBF or controller; the conditions are necessary only.
    NotViolated { solving_pairs: Vec<SolvingPair> },
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
    /// Minimum over a 5x refined grid, when the residual proved
    /// state-independent and worth re-sampling.
    pub refined_min: Option<f64>,
}

impl ResidualStats {
    fn from_values(vals: &[f64]) -> Self {
        if vals.is_empty() {
            return Self {
                min: 0.0,
                max: 0.0,
                mean: 0.0,
                count: 0,
                refined_min: None,
            };
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in vals {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Self {
            min,
            max,
            mean: sum / vals.len() as f64,
            count: vals.len(),
            refined_min: None,
        }
    }
}

/// Per-scale summary of a ladder sweep. `witness_min_residual` restricts
/// the minimum to the violation witness (the family itself, or the witness
/// direction of the equilibrium check).
#[derive(Debug, Clone, Serialize)]
pub struct RungReport {
    pub scale: f64,
    pub fully_unsolvable: bool,
    pub any_solvable: bool,
    pub min_residual: f64,
    pub witness_min_residual: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObstructionVerdict {
    pub theorem: Theorem,
    pub outcome: Outcome,
    pub region: String,
    pub notes: Vec<String>,
    pub residual_statistics: ResidualStats,
    pub sampled_points: usize,
    pub epsilon_ladder: Vec<RungReport>,
}

impl ObstructionVerdict {
    pub fn is_violated(&self) -> bool {
        matches!(self.outcome, Outcome::Violated { .. })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let (outcome, witness) = match &self.outcome {
            Outcome::Violated {
                witness,
                witness_vector,
                evidence,
            } => (
                "Violated",
                serde_json::json!({
                    "description": witness,
                    "vector": witness_vector,
                    "evidence": evidence,
                }),
            ),
            Outcome::NotViolated { solving_pairs } => (
                "NotViolated",
                serde_json::to_value(solving_pairs.first()).unwrap_or(serde_json::Value::Null),
            ),
            Outcome::Inconclusive => ("Inconclusive", serde_json::Value::Null),
        };
        serde_json::json!({
            "theorem": self.theorem,
            "outcome": outcome,
            "witness": witness,
            "residual_statistics": self.residual_statistics,
            "sampled_points": self.sampled_points,
            "epsilon_ladder": self.epsilon_ladder,
            "region": self.region,
            "notes": self.notes,
        })
    }
}

fn inconclusive_verdict(
    theorem: Theorem,
    region: String,
    notes: Vec<String>,
) -> ObstructionVerdict {
    ObstructionVerdict {
        theorem,
        outcome: Outcome::Inconclusive,
        region,
        notes,
        residual_statistics: ResidualStats::from_values(&[]),
        sampled_points: 0,
        epsilon_ladder: vec![],
    }
}

/// Density and seeding knobs for the point sweeps.
#[derive(Debug, Clone)]
pub struct SamplingOptions {
    /// Multiplies both the boundary-sample count and the random-interior
    /// count.
    pub sample_multiplier: usize,
    pub seed: u64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            sample_multiplier: 1,
            seed: 0,
        }
    }
}

fn region_description(s: &SafeSet) -> String {
    format!(
        "safe set in {:?} x {:?} at resolution {}",
        s.bbox().lower(),
        s.bbox().upper(),
        s.resolution()
    )
}

/// Cell centers of the cubical approximation that lie in C, plus boundary
/// samples, plus rejection-sampled random interior points.
fn search_points(
    s: &SafeSet,
    complex: &CubicalComplex,
    boundary: &[Vec<f64>],
    opts: &SamplingOptions,
) -> Result<Vec<Vec<f64>>, ObstructionError> {
    let h = s.h_fn()?;
    let mut pts: Vec<Vec<f64>> = Vec::new();
    for idx in complex.top_cells() {
        let center = complex.cell_box(&idx).center();
        if h(&center).map(|v| v >= 0.0).unwrap_or(false) {
            pts.push(center);
        }
    }
    pts.extend(boundary.iter().cloned());
    let n = s.n();
    let want = RANDOM_INTERIOR_PER_N2 * n * n * opts.sample_multiplier;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut got = 0;
    let mut tries = 0usize;
    while got < want && tries < 1000 * want.max(1) {
        tries += 1;
        let p = s.bbox().sample(&mut rng);
        if h(&p).map(|v| v > 0.0).unwrap_or(false) {
            pts.push(p);
            got += 1;
        }
    }
    Ok(pts)
}

/// Necessary-condition check for a CBF + continuous safe controller pair:
/// an admissible perturbation Z (dh·Z ≤ 0 on ∂C) must be matched by the
/// dynamics somewhere on C whenever χ(C) ≠ 0.
pub fn check_theorem3(
    sys: &System,
    s: &SafeSet,
    z: &PerturbationField,
) -> Result<ObstructionVerdict, ObstructionError> {
    check_theorem3_with(sys, s, z, &SamplingOptions::default())
}

pub fn check_theorem3_with(
    sys: &System,
    s: &SafeSet,
    zf: &PerturbationField,
    opts: &SamplingOptions,
) -> Result<ObstructionVerdict, ObstructionError> {
    if zf.is_family() {
        return Err(ObstructionError::Precondition(
            "this check takes a fixed field; scale families go through check_neighborhood_family"
                .into(),
        ));
    }
    if sys.n() != s.n() || zf.n() != s.n() {
        return Err(ObstructionError::Precondition(format!(
            "dimension mismatch: system n = {}, safe set n = {}, field n = {}",
            sys.n(),
            s.n(),
            zf.n()
        )));
    }
    let region = region_description(s);
    let complex = build_cubical_complex(s)?;
    let chi = complex.euler_characteristic();
    if chi == 0 {
        return Ok(inconclusive_verdict(
            Theorem::T3,
            region,
            vec!["Euler characteristic zero — theorem silent".into()],
        ));
    }
    let mut notes = vec![format!("chi(C) = {chi}")];
    let comp = s.compactness_check()?;
    if !comp.holds {
        notes.push(format!(
            "C is not compactly contained in the bounding box (max face value {:.3e}); the check needs a compact regular domain",
            comp.max_face_value
        ));
        return Ok(inconclusive_verdict(Theorem::T3, region, notes));
    }
    let boundary = boundary_sample(s, BOUNDARY_POINTS * opts.sample_multiplier)?;
    let verified = verify_admissibility(s, zf, BOUNDARY_POINTS * opts.sample_multiplier)?;
    notes.push("dh·Z <= 0 verified at boundary samples".into());
    let eval = verified.evaluator(None)?;
    let points = search_points(s, &complex, &boundary.points, opts)?;
    let solves: Vec<PointSolve> = points
        .par_iter()
        .map(|p| {
            let zp = eval(p).map_err(ObstructionError::Dsl)?;
            best_input(sys, p, &zp)
        })
        .collect::<Result<_, _>>()?;
    let statuses: Vec<SolvabilityStatus> = points
        .iter()
        .zip(&solves)
        .map(|(p, ps)| {
            let zp = eval(p).map_err(ObstructionError::Dsl)?;
            Ok(classify(ps, p, tol_solve(&zp)))
        })
        .collect::<Result<_, ObstructionError>>()?;

    let residuals: Vec<f64> = statuses.iter().map(|st| st.residual()).collect();
    let mut stats = ResidualStats::from_values(&residuals);
    let all_exact = solves.iter().all(|ps| ps.method == SolveMethod::ExactSpan);
    let all_unsolvable = !statuses.is_empty() && statuses.iter().all(|st| st.is_unsolvable());
    let solving_pairs: Vec<SolvingPair> = statuses
        .iter()
        .filter_map(|st| match st {
            SolvabilityStatus::Solvable { p, u, residual } => Some(SolvingPair {
                p: p.clone(),
                u: u.clone(),
                residual: *residual,
            }),
            _ => None,
        })
        .take(5)
        .collect();

    let outcome = if all_unsolvable {
        if all_exact && stats.max - stats.min <= STATE_INDEPENDENT_REL * (1.0 + stats.max) {
            if let Some(refined) = refined_residual_min(sys, s, &eval)? {
                stats.refined_min = Some(refined);
                notes.push(format!(
                    "residual is state-independent; refined-grid minimum {refined:.6e}"
                ));
            }
        }
        Outcome::Violated {
            witness: verified.description().to_string(),
            witness_vector: None,
            evidence: format!(
                "all {} sampled points unsolvable; min residual {:.6e}",
                statuses.len(),
                stats.min
            ),
        }
    } else if !solving_pairs.is_empty() {
        Outcome::NotViolated { solving_pairs }
    } else {
        notes.push("mixed unsolvable and inconclusive point results".into());
        Outcome::Inconclusive
    };
    Ok(ObstructionVerdict {
        theorem: Theorem::T3,
        outcome,
        region,
        notes,
        residual_statistics: stats,
        sampled_points: points.len(),
        epsilon_ladder: vec![],
    })
}

/// Minimum residual over a REFINED_GRID_FACTOR-times finer vertex grid
/// restricted to C, stride-subsampled past REFINED_GRID_CAP points.
fn refined_residual_min(
    sys: &System,
    s: &SafeSet,
    eval: &(impl Fn(&[f64]) -> Result<Vec<f64>, DslError> + Sync),
) -> Result<Option<f64>, ObstructionError> {
    let res = s.resolution() * REFINED_GRID_FACTOR;
    let bx = s.bbox();
    let n = bx.dim();
    let verts = res + 1;
    let mut total: usize = 1;
    for _ in 0..n {
        total = total.saturating_mul(verts);
    }
    let stride = total.div_ceil(REFINED_GRID_CAP).max(1);
    let h = s.h_fn()?;
    let indices: Vec<usize> = (0..total).step_by(stride).collect();
    let min = indices
        .par_iter()
        .map(|&lin| -> Result<f64, ObstructionError> {
            let mut idx = vec![0usize; n];
            let mut rem = lin;
            for a in 0..n {
                idx[a] = rem % verts;
                rem /= verts;
            }
            let p = bx.vertex(&idx, res);
            match h(&p) {
                Ok(v) if v >= 0.0 => {
                    let zp = eval(&p).map_err(ObstructionError::Dsl)?;
                    Ok(best_input(sys, &p, &zp)?.residual)
                }
                _ => Ok(f64::INFINITY),
            }
        })
        .try_reduce(|| f64::INFINITY, |a, b| Ok(a.min(b)))?;
    Ok(if min.is_finite() { Some(min) } else { None })
}

/// Necessary-condition check for families Z_ε vanishing at ε = 0: over the
/// chosen region (C, or a flow-out inflation of it), solvability must
/// appear once the scale is small enough. Violated means every rung of the
/// scale ladder stayed unsolvable everywhere.
pub fn check_neighborhood_family(
    sys: &System,
    s: &SafeSet,
    zfam: &PerturbationField,
    theorem: Theorem,
) -> Result<ObstructionVerdict, ObstructionError> {
    check_neighborhood_family_with(sys, s, zfam, theorem, &SamplingOptions::default())
}

pub fn check_neighborhood_family_with(
    sys: &System,
    s: &SafeSet,
    zfam: &PerturbationField,
    theorem: Theorem,
    opts: &SamplingOptions,
) -> Result<ObstructionVerdict, ObstructionError> {
    match theorem {
        Theorem::T4 | Theorem::T5 | Theorem::Cor1 => {}
        other => {
            return Err(ObstructionError::Precondition(format!(
                "family checks cover T4, T5 and Cor1, not {other}"
            )))
        }
    }
    if !zfam.is_family() {
        return Err(ObstructionError::Precondition(
            "a scale parameter is required; fixed fields go through check_theorem3".into(),
        ));
    }
    if sys.n() != s.n() || zfam.n() != s.n() {
        return Err(ObstructionError::Precondition(format!(
            "dimension mismatch: system n = {}, safe set n = {}, family n = {}",
            sys.n(),
            s.n(),
            zfam.n()
        )));
    }
    let base_region = region_description(s);
    let complex = build_cubical_complex(s)?;
    let chi = complex.euler_characteristic();
    if chi == 0 {
        return Ok(inconclusive_verdict(
            theorem,
            base_region,
            vec!["Euler characteristic zero — theorem silent".into()],
        ));
    }
    let mut notes = vec![format!("chi(C) = {chi}")];
    let comp = s.compactness_check()?;
    if !comp.holds {
        notes.push(format!(
            "C is not compactly contained in the bounding box (max face value {:.3e}); the check needs a compact regular domain",
            comp.max_face_value
        ));
        return Ok(inconclusive_verdict(theorem, base_region, notes));
    }

    // The family must vanish at scale zero; otherwise the ladder tests a
    // different hypothesis than "arbitrarily small perturbations".
    let eval0 = zfam.evaluator(Some(0.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(FAMILY_ZERO_SEED);
    for _ in 0..FAMILY_ZERO_SAMPLES {
        let p = s.bbox().sample(&mut rng);
        let v = eval0(&p)?;
        let nv = norm(&v);
        if nv > FAMILY_ZERO_TOL {
            return Err(ObstructionError::FamilyNotVanishing { norm: nv, point: p });
        }
    }

    let (region_set, region, region_complex) = match theorem {
        Theorem::T4 => {
            let fo = flow::flow_out(s, NEIGHBORHOOD_T0, NEIGHBORHOOD_T1)?;
            notes.extend(fo.warnings.iter().cloned());
            let rc = build_cubical_complex(&fo.shifted)?;
            let desc = format!(
                "flow-out neighborhood {{h >= -{NEIGHBORHOOD_T0}}} of the safe set"
            );
            (fo.shifted, desc, rc)
        }
        _ => (s.clone(), base_region, complex),
    };
    let boundary = boundary_sample(&region_set, BOUNDARY_POINTS * opts.sample_multiplier)?;
    let points = search_points(&region_set, &region_complex, &boundary.points, opts)?;

    let mut rungs: Vec<RungReport> = Vec::new();
    let mut all_residuals: Vec<f64> = Vec::new();
    let mut solving_pairs: Vec<SolvingPair> = Vec::new();
    let mut refined_min: Option<f64> = None;
    for k in 1..=LADDER_RUNGS {
        let eps = 0.5f64.powi(k as i32);
        let eval = zfam.evaluator(Some(eps))?;
        let solves: Vec<(PointSolve, f64)> = points
            .par_iter()
            .map(|p| -> Result<(PointSolve, f64), ObstructionError> {
                let zp = eval(p).map_err(ObstructionError::Dsl)?;
                let ps = best_input(sys, p, &zp)?;
                let tol = tol_solve(&zp);
                Ok((ps, tol))
            })
            .collect::<Result<_, _>>()?;
        let statuses: Vec<SolvabilityStatus> = points
            .iter()
            .zip(&solves)
            .map(|(p, (ps, tol))| classify(ps, p, *tol))
            .collect();
        let min_residual = statuses
            .iter()
            .map(|st| st.residual())
            .fold(f64::INFINITY, f64::min);
        let fully_unsolvable = !statuses.is_empty() && statuses.iter().all(|st| st.is_unsolvable());
        let any_solvable = statuses.iter().any(|st| st.is_solvable());
        if solving_pairs.len() < 5 {
            solving_pairs.extend(statuses.iter().filter_map(|st| match st {
                SolvabilityStatus::Solvable { p, u, residual } => Some(SolvingPair {
                    p: p.clone(),
                    u: u.clone(),
                    residual: *residual,
                }),
                _ => None,
            }));
            solving_pairs.truncate(5);
        }
        all_residuals.extend(statuses.iter().map(|st| st.residual()));
        // State-independent residuals get the refined-grid treatment once,
        // at the coarsest scale.
        if k == 1 && fully_unsolvable {
            let max_residual = statuses
                .iter()
                .map(|st| st.residual())
                .fold(f64::NEG_INFINITY, f64::max);
            let all_exact = solves
                .iter()
                .all(|(ps, _)| ps.method == SolveMethod::ExactSpan);
            if all_exact
                && max_residual - min_residual <= STATE_INDEPENDENT_REL * (1.0 + max_residual)
            {
                refined_min = refined_residual_min(sys, &region_set, &eval)?;
                if let Some(r) = refined_min {
                    notes.push(format!(
                        "residual is state-independent at scale {eps}; refined-grid minimum {r:.6e}"
                    ));
                }
            }
        }
        rungs.push(RungReport {
            scale: eps,
            fully_unsolvable,
            any_solvable,
            min_residual,
            witness_min_residual: Some(min_residual),
        });
    }

    let violated = rungs.iter().all(|r| r.fully_unsolvable);
    let confirmed = rungs
        .windows(CONFIRMATION_RUNGS)
        .any(|w| w.iter().all(|r| r.any_solvable));
    let mut stats = ResidualStats::from_values(&all_residuals);
    stats.refined_min = refined_min;
    let outcome = if violated {
        Outcome::Violated {
            witness: zfam.description().to_string(),
            witness_vector: None,
            evidence: format!(
                "unsolvable at every scale 2^-1..2^-{LADDER_RUNGS} over {} points",
                points.len()
            ),
        }
    } else if confirmed {
        Outcome::NotViolated { solving_pairs }
    } else {
        notes.push(format!(
            "no {CONFIRMATION_RUNGS} consecutive solvable scales and not uniformly unsolvable"
        ));
        Outcome::Inconclusive
    };
    Ok(ObstructionVerdict {
        theorem,
        outcome,
        region,
        notes,
        residual_statistics: stats,
        sampled_points: points.len(),
        epsilon_ladder: rungs,
    })
}

/// Knobs for the equilibrium (Brockett-type) check.
#[derive(Debug, Clone)]
pub struct BrockettOptions {
    pub grid_points_per_axis: usize,
    pub refine_starts: usize,
    pub rungs: u32,
}

impl Default for BrockettOptions {
    fn default() -> Self {
        Self {
            grid_points_per_axis: BROCKETT_GRID_PER_AXIS,
            refine_starts: BROCKETT_REFINE_STARTS,
            rungs: BROCKETT_RUNGS,
        }
    }
}

/// Equilibrium surjectivity check: every small target velocity z near 0
/// must be realized by some (x, u) near the equilibrium. Directions that
/// stay unsolvable on a whole ladder of shrinking radii certify violation.
pub fn brockett_check(
    sys: &System,
    xstar: &[f64],
    ball_radius: f64,
) -> Result<ObstructionVerdict, ObstructionError> {
    brockett_check_with(sys, xstar, ball_radius, &BrockettOptions::default())
}

pub fn brockett_check_with(
    sys: &System,
    xstar: &[f64],
    ball_radius: f64,
    opts: &BrockettOptions,
) -> Result<ObstructionVerdict, ObstructionError> {
    let n = sys.n();
    if xstar.len() != n {
        return Err(ObstructionError::Precondition(format!(
            "equilibrium point must have dimension {n} (got {})",
            xstar.len()
        )));
    }
    if !(ball_radius > 0.0 && ball_radius.is_finite()) {
        return Err(ObstructionError::Precondition(
            "ball radius must be positive and finite".into(),
        ));
    }
    if opts.grid_points_per_axis < 2 || opts.rungs == 0 {
        return Err(ObstructionError::Precondition(
            "need at least 2 grid points per axis and 1 radius rung".into(),
        ));
    }
    let lo: Vec<f64> = xstar.iter().map(|v| v - ball_radius).collect();
    let hi: Vec<f64> = xstar.iter().map(|v| v + ball_radius).collect();
    let bx = AxisBox::new(lo, hi)?;
    let grid = box_grid(&bx, opts.grid_points_per_axis);
    let mut notes = vec![];

    // Equilibrium admissibility: some input should hold xstar still.
    let zero = vec![0.0; n];
    let eq = best_input(sys, xstar, &zero)?;
    if eq.residual > tol_solve(&zero) {
        notes.push(format!(
            "no admissible input holds the equilibrium (best residual {:.3e}); results describe the point as given",
            eq.residual
        ));
    }

    let dirs = brockett_directions(n);
    let radii: Vec<f64> = (0..opts.rungs)
        .map(|k| ball_radius * 0.5f64.powi(k as i32))
        .collect();

    // directions x radii solvability table.
    struct DirRung {
        status: SolvabilityStatus,
    }
    let table: Vec<Vec<DirRung>> = dirs
        .par_iter()
        .map(|d| -> Result<Vec<DirRung>, ObstructionError> {
            radii
                .iter()
                .map(|&r| {
                    let z: Vec<f64> = d.iter().map(|v| v * r).collect();
                    let (ps, x) = brockett_direction_solve(sys, &bx, &grid, &z, opts)?;
                    Ok(DirRung {
                        status: classify(&ps, &x, tol_solve(&z)),
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let per_dir_unsolvable: Vec<bool> = table
        .iter()
        .map(|rungs| rungs.iter().all(|dr| dr.status.is_unsolvable()))
        .collect();
    let all_solvable = table
        .iter()
        .all(|rungs| rungs.iter().all(|dr| dr.status.is_solvable()));
    let all_residuals: Vec<f64> = table
        .iter()
        .flat_map(|rungs| rungs.iter().map(|dr| dr.status.residual()))
        .collect();
    let stats = ResidualStats::from_values(&all_residuals);

    // Primary witness: among fully-unsolvable directions, the one whose
    // worst-case residual-to-radius ratio is largest.
    let mut primary: Option<(usize, f64)> = None;
    for (i, &unsat) in per_dir_unsolvable.iter().enumerate() {
        if !unsat {
            continue;
        }
        let ratio = table[i]
            .iter()
            .zip(&radii)
            .map(|(dr, &r)| dr.status.residual() / r)
            .fold(f64::INFINITY, f64::min);
        if primary.map(|(_, best)| ratio > best).unwrap_or(true) {
            primary = Some((i, ratio));
        }
    }

    let rung_reports: Vec<RungReport> = radii
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let min_residual = table
                .iter()
                .map(|rungs| rungs[k].status.residual())
                .fold(f64::INFINITY, f64::min);
            RungReport {
                scale: r,
                fully_unsolvable: table.iter().all(|rungs| rungs[k].status.is_unsolvable()),
                any_solvable: table.iter().any(|rungs| rungs[k].status.is_solvable()),
                min_residual,
                witness_min_residual: primary.map(|(i, _)| table[i][k].status.residual()),
            }
        })
        .collect();

    let region = format!(
        "box {:?} x {:?} around the equilibrium, {} directions, radii {:.3e}..{:.3e}",
        bx.lower(),
        bx.upper(),
        dirs.len(),
        radii[0],
        radii[radii.len() - 1]
    );
    let outcome = if let Some((i, ratio)) = primary {
        let count = per_dir_unsolvable.iter().filter(|&&b| b).count();
        Outcome::Violated {
            witness: format!("target direction {:?}", dirs[i]),
            witness_vector: Some(dirs[i].clone()),
            evidence: format!(
                "{count} of {} directions unsolvable at every radius; witness min residual/radius ratio {ratio:.4}",
                dirs.len()
            ),
        }
    } else if all_solvable {
        let pairs: Vec<SolvingPair> = table
            .iter()
            .flat_map(|rungs| rungs.iter())
            .filter_map(|dr| match &dr.status {
                SolvabilityStatus::Solvable { p, u, residual } => Some(SolvingPair {
                    p: p.clone(),
                    u: u.clone(),
                    residual: *residual,
                }),
                _ => None,
            })
            .take(5)
            .collect();
        Outcome::NotViolated {
            solving_pairs: pairs,
        }
    } else {
        notes.push("some directions mixed solvable and unsolvable rungs".into());
        Outcome::Inconclusive
    };
    Ok(ObstructionVerdict {
        theorem: Theorem::Brockett,
        outcome,
        region,
        notes,
        residual_statistics: stats,
        sampled_points: grid.len(),
        epsilon_ladder: rung_reports,
    })
}

/// Grid scan over states, then joint (x, u) projected-gradient refinement
/// from the best grid candidates. Returns the best solve and the state it
/// was found at.
fn brockett_direction_solve(
    sys: &System,
    bx: &AxisBox,
    grid: &[Vec<f64>],
    z: &[f64],
    opts: &BrockettOptions,
) -> Result<(PointSolve, Vec<f64>), ObstructionError> {
    let mut scans: Vec<(usize, PointSolve)> = Vec::with_capacity(grid.len());
    for (i, x) in grid.iter().enumerate() {
        scans.push((i, best_input(sys, x, z)?));
    }
    scans.sort_by(|a, b| a.1.residual.total_cmp(&b.1.residual));
    let best = &scans[0];
    let tol = tol_solve(z);
    if best.1.residual <= tol {
        return Ok((best.1.clone(), grid[best.0].clone()));
    }

    let n = sys.n();
    let m = sys.m();
    let input_set = sys.input_set().clone();
    let objective = |v: &[f64]| -> Result<f64, SystemError> {
        let f = sys.eval_dynamics(&v[..n], &v[n..])?;
        Ok(f.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
    };
    let project = move |v: &[f64]| -> Vec<f64> {
        let mut x = v[..n].to_vec();
        bx.clamp(&mut x);
        x.extend(input_set.project(&v[n..]));
        x
    };
    let mut best_solve = best.1.clone();
    let mut best_x = grid[best.0].clone();
    let mut refined_converged = true;
    for (gi, ps) in scans.iter().take(opts.refine_starts) {
        let mut v0 = grid[*gi].clone();
        if ps.u.len() == m {
            v0.extend(ps.u.iter().copied());
        } else {
            v0.extend(std::iter::repeat_n(0.0, m));
        }
        let (v, fsq, converged) =
            projected_gradient(&objective, &project, &v0, SEARCH_MAX_ITER)?;
        refined_converged &= converged;
        let r = fsq.max(0.0).sqrt();
        if r < best_solve.residual {
            best_solve = PointSolve {
                u: v[n..].to_vec(),
                residual: r,
                converged: true,
                method: SolveMethod::ConstrainedSearch,
            };
            best_x = v[..n].to_vec();
        }
    }
    best_solve.converged = best_solve.converged && refined_converged;
    Ok((best_solve, best_x))
}

/// 2n² unit directions: all ±eᵢ, then normalized ±eᵢ±eⱼ for i < j.
fn brockett_directions(n: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut d = vec![0.0; n];
            d[i] = sign;
            dirs.push(d);
        }
    }
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        for j in (i + 1)..n {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut d = vec![0.0; n];
                d[i] = si * inv_sqrt2;
                d[j] = sj * inv_sqrt2;
                dirs.push(d);
            }
        }
    }
    dirs
}

fn box_grid(bx: &AxisBox, per_axis: usize) -> Vec<Vec<f64>> {
    let n = bx.dim();
    let mut total: usize = 1;
    for _ in 0..n {
        total = total.saturating_mul(per_axis);
    }
    let lo = bx.lower();
    let hi = bx.upper();
    (0..total)
        .map(|lin| {
            let mut rem = lin;
            (0..n)
                .map(|a| {
                    let k = rem % per_axis;
                    rem /= per_axis;
                    lo[a] + (hi[a] - lo[a]) * k as f64 / (per_axis - 1) as f64
                })
                .collect()
        })
        .collect()
}

/// Built-in perturbation generators: outward gradient multiples and the
/// zero field (admissible for the fixed-field check), plus constant-axis
/// scale families for the neighborhood checks.
pub fn candidate_perturbations(s: &SafeSet) -> Result<Vec<PerturbationField>, ObstructionError> {
    let n = s.n();
    let mut out = Vec::new();
    for c in [0.1, 1.0] {
        let comps: Vec<Expr> = s
            .grad_exprs()
            .iter()
            .map(|g| {
                Expr::Binary(
                    BinOp::Mul,
                    Box::new(Expr::Const(-c)),
                    Box::new(g.clone()),
                )
            })
            .collect();
        out.push(PerturbationField::new(
            comps,
            None,
            format!("-{c}*grad h"),
        )?);
    }
    out.push(PerturbationField::new(
        vec![Expr::Const(0.0); n],
        None,
        "zero field",
    )?);
    for i in 1..=n {
        let comps: Vec<Expr> = (1..=n)
            .map(|j| {
                if i == j {
                    Expr::Var("eps".into())
                } else {
                    Expr::Const(0.0)
                }
            })
            .collect();
        out.push(PerturbationField::new(
            comps,
            Some("eps".into()),
            format!("eps*e{i}"),
        )?);
    }
    Ok(out)
}

//! Safe-controller synthesis: pointwise quadratic-program filters and
//! partition-of-unity blended controllers.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::DslError;
use crate::flow::{self, AlphaFunction, FlowError};
use crate::geometry::{GeometryError, SafeSet};
use crate::system::{dist, norm, ControlAffineSystem, Controller, InputSet, SystemError};

/// Weight sums below this are treated as coverage holes: normalizing
/// subnormal bump values would produce garbage weights.
const MIN_WEIGHT_SUM: f64 = 1e-300;
/// Strictness margin m₀ demanded of the barrier at every grid point during
/// cover construction.
const STRICT_MARGIN: f64 = 1e-3;
/// Random points of each candidate patch checked against the m₀/2 margin.
const PATCH_CHECK_SAMPLES: usize = 50;
/// Patch radius cap, in grid cells. Must exceed the marking reach
/// (2√n cells) plus one cell diagonal, or no patch could ever mark a
/// neighboring grid point.
const PATCH_RADIUS_CELLS: f64 = 8.0;
/// Margin-target doublings attempted per patch before settling for the
/// largest radius found. Unbounded input sets keep gaining radius from a
/// larger margin; bounded ones stall after one doubling and break early.
const MARGIN_ESCALATIONS: usize = 60;
const RADIUS_BISECT_ITERS: usize = 40;
const PATCH_SEED: u64 = 11;
/// Minimum sample count for strictness verification.
const VERIFY_MIN_SAMPLES: usize = 10_000;
const VERIFY_SEED: u64 = 7;
/// Flow-out depth defining the verification neighborhood C̃ = {h ≥ -t₀}.
const VERIFY_T0: f64 = 0.05;
const VERIFY_T1: f64 = 0.1;
const QP_BISECT_ITERS: usize = 200;
/// ‖a‖ below this (relative to the gradient) counts as a degenerate
/// constraint direction.
const QP_DEGENERACY_REL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(
        "barrier is not strict at {point:?}: best attainable dh·F = {achieved:.6e} is below the required {required:.6e}"
    )]
    NotStrict {
        point: Vec<f64>,
        required: f64,
        achieved: f64,
    },
    #[error("no patch covers the sampled point {point:?}")]
    CoverageHole { point: Vec<f64> },
    #[error("strict decrease condition fails at {point:?}: slack {slack:.6e}")]
    StrictnessViolation { point: Vec<f64>, slack: f64 },
}

/// One ball patch of a blended controller: a constant input applied near a
/// center, faded out by a smooth bump supported on the ball.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Patch {
    pub center: Vec<f64>,
    pub radius: f64,
    pub input: Vec<f64>,
}

/// Smooth controller κ(p) = Σⱼ ψⱼ(p)·uⱼ where ψⱼ are normalized bump
/// weights over the patches. On the covered region the weights form a
/// partition of unity; outside it the controller smoothly decays the
/// nearest patch's input (behavior there is unused by any verification).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlendedController {
    pub patches: Vec<Patch>,
    /// Bump profile name. Only `exp-bump` (exp(−1/(1−s²)) on s<1) is
    /// produced; the field makes serialized controllers self-describing.
    pub profile: String,
    /// Normalization rule name; always `sum-to-one`.
    pub normalization: String,
}

/// The standard smooth compactly supported bump profile on the unit ball:
/// exp(−1/(1−s²)) for s < 1, zero for s ≥ 1.
pub fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (-1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

impl BlendedController {
    pub fn new(patches: Vec<Patch>) -> Self {
        Self {
            patches,
            profile: "exp-bump".to_string(),
            normalization: "sum-to-one".to_string(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.patches.first().map_or(0, |p| p.input.len())
    }

    pub fn state_dim(&self) -> usize {
        self.patches.first().map_or(0, |p| p.center.len())
    }

    /// Raw bump values φⱼ(p), before normalization.
    pub fn raw_weights(&self, p: &[f64]) -> Vec<f64> {
        self.patches
            .iter()
            .map(|patch| bump(dist(p, &patch.center) / patch.radius))
            .collect()
    }

    /// Normalized weights ψⱼ(p), or `None` when p is outside the covered
    /// region (all bumps vanish).
    pub fn weights(&self, p: &[f64]) -> Option<Vec<f64>> {
        let raw = self.raw_weights(p);
        let total: f64 = raw.iter().sum();
        if total < MIN_WEIGHT_SUM {
            return None;
        }
        Some(raw.into_iter().map(|w| w / total).collect())
    }

    /// κ(p). Inside the covered region this is the normalized blend; outside
    /// it, the nearest patch's input times a smooth radial cutoff (a
    /// convenience extension — verifications never sample there).
    pub fn eval(&self, p: &[f64]) -> Result<Vec<f64>, String> {
        if self.patches.is_empty() {
            return Err("blended controller has no patches".to_string());
        }
        let m = self.input_dim();
        if let Some(w) = self.weights(p) {
            let mut u = vec![0.0; m];
            for (j, patch) in self.patches.iter().enumerate() {
                for i in 0..m {
                    u[i] += w[j] * patch.input[i];
                }
            }
            return Ok(u);
        }
        // Outside the cover: decay the nearest patch's input with distance
        // past its boundary.
        let (mut best_gap, mut best) = (f64::INFINITY, 0usize);
        for (j, patch) in self.patches.iter().enumerate() {
            let gap = dist(p, &patch.center) - patch.radius;
            if gap < best_gap {
                best_gap = gap;
                best = j;
            }
        }
        let patch = &self.patches[best];
        let fade = (-(best_gap / patch.radius).powi(2)).exp();
        Ok(patch.input.iter().map(|v| v * fade).collect())
    }
}

/// Minimum-norm safety filter: at each queried p, the returned controller
/// solves min ‖u − nominal(p)‖² subject to dh·(drift + G·u) ≥ −α(h) over
/// the input set. Unconstrained inputs admit the closed-form half-space
/// projection; box inputs are solved exactly by dual bisection. Pointwise
/// infeasibility or a degenerate constraint direction (Gᵀgrad h = 0 while
/// the constraint is active) surface as controller evaluation errors.
pub fn qp_filter(
    sys: &ControlAffineSystem,
    s: &SafeSet,
    alpha: &AlphaFunction,
    nominal: &Controller,
) -> Result<Controller, SynthesisError> {
    match sys.input_set() {
        InputSet::FullSpace { .. } | InputSet::Box { .. } => {}
        other => {
            return Err(SynthesisError::Precondition(format!(
                "the filter handles FullSpace and Box input sets, not {other:?}"
            )))
        }
    }
    if sys.n() != s.n() {
        return Err(SynthesisError::Precondition(format!(
            "system dimension {} does not match the safe set dimension {}",
            sys.n(),
            s.n()
        )));
    }
    if nominal.m() != sys.m() {
        return Err(SynthesisError::Precondition(format!(
            "nominal controller outputs {} inputs, the system takes {}",
            nominal.m(),
            sys.m()
        )));
    }
    let description = format!("qp-filter over {:?}", sys.input_set());
    let sys = sys.clone();
    let s = s.clone();
    let alpha = alpha.clone();
    let nominal = nominal.clone();
    let m = sys.m();
    let f = move |p: &[f64]| -> Result<Vec<f64>, SystemError> {
        let fail = |reason: String| SystemError::Controller {
            p: p.to_vec(),
            reason,
        };
        let grad = s.grad_at(p).map_err(|e| fail(e.to_string()))?;
        let h = s.h_at(p).map_err(|e| fail(e.to_string()))?;
        let alpha_h = alpha.eval(h).map_err(|e| fail(e.to_string()))?;
        let u_nom = nominal.eval(p)?;
        let drift = sys.drift_at(p)?;
        let g = sys.input_matrix(p)?;
        let a: Vec<f64> = (0..m)
            .map(|j| (0..sys.n()).map(|i| g[(i, j)] * grad[i]).sum())
            .collect();
        // Constraint: aᵀu ≥ rhs.
        let rhs = -alpha_h - dot(&grad, &drift);
        qp_point(&a, rhs, &u_nom, sys.input_set(), &grad).map_err(fail)
    };
    Ok(Controller::Tabulated {
        m,
        description,
        f: Arc::new(f),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn qp_point(
    a: &[f64],
    rhs: f64,
    u_nom: &[f64],
    input_set: &InputSet,
    grad: &[f64],
) -> Result<Vec<f64>, String> {
    let degenerate = norm(a) <= QP_DEGENERACY_REL * (1.0 + norm(grad));
    match input_set {
        InputSet::FullSpace { .. } => {
            let gap = rhs - dot(a, u_nom);
            if gap <= 0.0 {
                return Ok(u_nom.to_vec());
            }
            if degenerate {
                return Err(format!(
                    "degenerate safety constraint: Gᵀgrad h vanishes while the constraint is active (gap {gap:.6e})"
                ));
            }
            let a2 = dot(a, a);
            Ok(u_nom
                .iter()
                .zip(a)
                .map(|(un, ai)| un + gap * ai / a2)
                .collect())
        }
        InputSet::Box { lower, upper } => {
            let project = |lam: f64| -> Vec<f64> {
                (0..a.len())
                    .map(|i| (u_nom[i] + lam * a[i]).clamp(lower[i], upper[i]))
                    .collect()
            };
            let u0 = project(0.0);
            if dot(a, &u0) >= rhs {
                return Ok(u0);
            }
            if degenerate {
                return Err(format!(
                    "degenerate safety constraint: Gᵀgrad h vanishes while the constraint is active (gap {:.6e})",
                    rhs - dot(a, &u0)
                ));
            }
            // aᵀ·project(λ) is nondecreasing in λ, so the active solution is
            // found by bisection on the multiplier.
            let g_max: f64 = (0..a.len())
                .map(|i| {
                    if a[i] > 0.0 {
                        a[i] * upper[i]
                    } else if a[i] < 0.0 {
                        a[i] * lower[i]
                    } else {
                        a[i] * u0[i]
                    }
                })
                .sum();
            if g_max < rhs {
                return Err(format!(
                    "safety constraint infeasible over the input box: gap {:.6e}",
                    rhs - g_max
                ));
            }
            let mut hi = 1.0;
            let mut grow = 0;
            while dot(a, &project(hi)) < rhs && grow < QP_BISECT_ITERS {
                hi *= 2.0;
                grow += 1;
            }
            if dot(a, &project(hi)) < rhs {
                // rhs equals the supremum; the maximizing vertex attains it.
                return Ok((0..a.len())
                    .map(|i| {
                        if a[i] > 0.0 {
                            upper[i]
                        } else if a[i] < 0.0 {
                            lower[i]
                        } else {
                            u0[i]
                        }
                    })
                    .collect());
            }
            let mut lo = 0.0;
            for _ in 0..QP_BISECT_ITERS {
                let mid = 0.5 * (lo + hi);
                if dot(a, &project(mid)) >= rhs {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(project(hi))
        }
        other => Err(format!("unsupported input set for the filter: {other:?}")),
    }
}

/// The input maximizing dh·F(p, u) over the input set, with the value it
/// attains. Unbounded input sets have no maximizer, so they get the
/// canonical gradient input u = Gᵀgrad h / 2, scaled up if that misses the
/// strictness target.
fn margin_max_input(
    sys: &ControlAffineSystem,
    p: &[f64],
    grad: &[f64],
    target: f64,
) -> Result<(Vec<f64>, f64), SynthesisError> {
    let drift = sys.drift_at(p)?;
    let base = dot(grad, &drift);
    let m = sys.m();
    if m == 0 {
        return Ok((vec![], base));
    }
    let g = sys.input_matrix(p)?;
    let a: Vec<f64> = (0..m)
        .map(|j| (0..sys.n()).map(|i| g[(i, j)] * grad[i]).sum())
        .collect();
    let an = norm(&a);
    let (u, val) = match sys.input_set() {
        InputSet::FullSpace { .. } => {
            if an <= QP_DEGENERACY_REL * (1.0 + norm(grad)) {
                (vec![0.0; m], base)
            } else {
                let half: Vec<f64> = a.iter().map(|v| v / 2.0).collect();
                let val = base + an * an / 2.0;
                if val >= target {
                    (half, val)
                } else {
                    let t = (target - base) / (an * an);
                    (a.iter().map(|v| t * v).collect(), target)
                }
            }
        }
        InputSet::Ball { radius } => {
            if an == 0.0 {
                (vec![0.0; m], base)
            } else {
                (a.iter().map(|v| radius * v / an).collect(), base + radius * an)
            }
        }
        InputSet::Sphere { radius } => {
            if an == 0.0 {
                let mut u = vec![0.0; m];
                u[0] = *radius;
                (u, base)
            } else {
                (a.iter().map(|v| radius * v / an).collect(), base + radius * an)
            }
        }
        InputSet::Box { lower, upper } => {
            let u: Vec<f64> = (0..m)
                .map(|i| {
                    if a[i] > 0.0 {
                        upper[i]
                    } else if a[i] < 0.0 {
                        lower[i]
                    } else {
                        0.0f64.clamp(lower[i], upper[i])
                    }
                })
                .collect();
            let val = base + dot(&a, &u);
            (u, val)
        }
        InputSet::FinitePoints { points } => {
            let mut best: Option<(Vec<f64>, f64)> = None;
            for u in points {
                let val = base + dot(&a, u);
                if best.as_ref().map(|(_, bv)| val > *bv).unwrap_or(true) {
                    best = Some((u.clone(), val));
                }
            }
            best.ok_or_else(|| {
                SynthesisError::Precondition("finite input set has no points".into())
            })?
        }
    };
    Ok((u, val))
}

/// Vertex grid of the bounding box restricted to {h ≥ 0}, in raster order.
fn raster_grid(s: &SafeSet) -> Result<Vec<Vec<f64>>, SynthesisError> {
    let bx = s.bbox();
    let res = s.resolution();
    let n = bx.dim();
    let verts = res + 1;
    let mut total: usize = 1;
    for _ in 0..n {
        total = total.saturating_mul(verts);
    }
    let h = s.h_fn()?;
    let mut out = Vec::new();
    for lin in 0..total {
        let mut idx = vec![0usize; n];
        let mut rem = lin;
        for a in 0..n {
            idx[a] = rem % verts;
            rem /= verts;
        }
        let p = bx.vertex(&idx, res);
        if h(&p)? >= 0.0 {
            out.push(p);
        }
    }
    Ok(out)
}

fn sample_ball(rng: &mut ChaCha8Rng, center: &[f64], radius: f64) -> Vec<f64> {
    let n = center.len();
    loop {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        if dot(&x, &x) <= 1.0 {
            return center.iter().zip(&x).map(|(c, v)| c + radius * v).collect();
        }
    }
}

/// Greedy ball cover of the inflated neighborhood C̃ = {h ≥ -t₀} — the same
/// region [`verify_strict`] later samples, so the blended controller is
/// defined wherever it will be audited. Each uncovered grid point of C̃ in
/// raster order becomes a patch center; its margin target doubles until the
/// largest radius sustaining margin m₀/2 (bisected, capped at
/// [`PATCH_RADIUS_CELLS`] grid cells) clears the marking reach, so patch
/// balls overlap enough that off-grid points of C̃ stay inside the union.
/// Fails if some grid point cannot meet the m₀ margin at all — a non-strict
/// barrier admits no such cover.
pub fn build_local_cover(
    sys: &ControlAffineSystem,
    s: &SafeSet,
    alpha: &AlphaFunction,
) -> Result<Vec<Patch>, SynthesisError> {
    if sys.n() != s.n() {
        return Err(SynthesisError::Precondition(format!(
            "system dimension {} does not match the safe set dimension {}",
            sys.n(),
            s.n()
        )));
    }
    let region = flow::flow_out(s, VERIFY_T0, VERIFY_T1)?.shifted;
    let points = raster_grid(&region)?;
    if points.is_empty() {
        return Err(SynthesisError::Precondition(
            "the safe set contains no grid points".into(),
        ));
    }
    let h_fn = s.h_fn()?;
    let grad_fn = s.grad_fn()?;

    // Strictness precondition with margin m₀ at every grid point of C̃.
    for p in &points {
        let grad = grad_fn(p)?;
        let required = -alpha.eval(h_fn(p)?)? + STRICT_MARGIN;
        let (_, val) = margin_max_input(sys, p, &grad, required + STRICT_MARGIN)?;
        if val < required {
            return Err(SynthesisError::NotStrict {
                point: p.clone(),
                required,
                achieved: val,
            });
        }
    }

    let spacing = s.bbox().spacing(s.resolution());
    let sp_max = spacing.iter().fold(0.0f64, |acc, &w| acc.max(w));
    let diag = spacing.iter().map(|w| w * w).sum::<f64>().sqrt();
    // A point of C̃ off the grid sits within one cell diagonal of a raster
    // point of C̃, plus another diagonal when its own cell's vertices all
    // fall just outside; marking only within radius − reach absorbs that.
    let reach = 2.0 * diag;
    let radius_goal = reach + diag;
    let cap = PATCH_RADIUS_CELLS * sp_max;
    let patch_ok = |center: &[f64], u: &[f64], r: f64, seed: u64| -> Result<bool, SynthesisError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..PATCH_CHECK_SAMPLES {
            let q = if k == 0 {
                center.to_vec()
            } else {
                sample_ball(&mut rng, center, r)
            };
            let slack = dot(&grad_fn(&q)?, &sys.eval_dynamics(&q, u)?)
                + alpha.eval(h_fn(&q)?)?;
            if slack < STRICT_MARGIN / 2.0 {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let best_radius = |center: &[f64], u: &[f64], seed: u64| -> Result<f64, SynthesisError> {
        if patch_ok(center, u, cap, seed)? {
            return Ok(cap);
        }
        let mut lo = 0.0f64;
        let mut hi = cap;
        for _ in 0..RADIUS_BISECT_ITERS {
            let mid = 0.5 * (lo + hi);
            if patch_ok(center, u, mid, seed)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    };

    let mut covered = vec![false; points.len()];
    let mut patches: Vec<Patch> = Vec::new();
    for i in 0..points.len() {
        if covered[i] {
            continue;
        }
        let center = &points[i];
        let grad = grad_fn(center)?;
        let required = -alpha.eval(h_fn(center)?)? + STRICT_MARGIN;
        let seed = PATCH_SEED.wrapping_add(patches.len() as u64);
        let mut target = required + STRICT_MARGIN;
        let mut best: Option<(Vec<f64>, f64)> = None;
        for _ in 0..MARGIN_ESCALATIONS {
            let (u, val) = margin_max_input(sys, center, &grad, target)?;
            let radius = best_radius(center, &u, seed)?;
            if best.as_ref().map(|(_, br)| radius > *br).unwrap_or(true) {
                best = Some((u, radius));
            }
            // Stop once neighbors can be marked, or once the input set has
            // no more margin to give.
            if radius >= radius_goal || val < target {
                break;
            }
            target += (target - required).max(STRICT_MARGIN);
        }
        let (u, radius) = best.expect("at least one escalation ran");
        if radius <= 0.0 {
            return Err(SynthesisError::NotStrict {
                point: center.clone(),
                required: STRICT_MARGIN / 2.0,
                achieved: f64::NEG_INFINITY,
            });
        }
        for (j, q) in points.iter().enumerate() {
            if !covered[j] && dist(q, center) <= radius - reach {
                covered[j] = true;
            }
        }
        patches.push(Patch {
            center: center.clone(),
            radius,
            input: u,
        });
    }
    Ok(patches)
}

/// Wraps validated patches into the partition-of-unity controller.
pub fn blend(patches: Vec<Patch>) -> Result<BlendedController, SynthesisError> {
    if patches.is_empty() {
        return Err(SynthesisError::Precondition(
            "a blended controller needs at least one patch".into(),
        ));
    }
    let n = patches[0].center.len();
    let m = patches[0].input.len();
    for patch in &patches {
        if patch.center.len() != n || patch.input.len() != m {
            return Err(SynthesisError::Precondition(
                "patches disagree on state or input dimension".into(),
            ));
        }
        if !(patch.radius > 0.0 && patch.radius.is_finite()) {
            return Err(SynthesisError::Precondition(format!(
                "patch at {:?} has nonpositive radius {}",
                patch.center, patch.radius
            )));
        }
    }
    Ok(BlendedController::new(patches))
}

/// Outcome of [`verify_strict`].
#[derive(Debug, Clone, Serialize)]
pub struct StrictnessReport {
    pub samples: usize,
    /// min over samples of dh·F(p, κ(p)) + α(h(p)); positive means the
    /// strict decrease condition holds on the sampled neighborhood.
    pub min_slack: f64,
    pub argmin: Vec<f64>,
    /// Worst |Σ ψⱼ(p) − 1| over samples (blended controllers only).
    pub max_weight_deviation: Option<f64>,
    /// Worst shortfall of the blend's slack against its active patches'
    /// minimum slack (blended controllers only); a convex combination of
    /// affine-in-u quantities keeps this at rounding level.
    pub blend_bound_max_gap: Option<f64>,
    pub region: String,
}

/// Samples the inflated neighborhood C̃ = {h ≥ -t₀} (which contains C) at
/// ≥ 10⁴ points and checks dh·F(p, κ(p)) + α(h(p)) > 0 everywhere. Blended
/// controllers additionally get their weight sums and the convexity bound
/// audited, and a sample outside every patch is a coverage-hole error.
pub fn verify_strict(
    sys: &ControlAffineSystem,
    s: &SafeSet,
    alpha: &AlphaFunction,
    controller: &Controller,
) -> Result<StrictnessReport, SynthesisError> {
    if sys.n() != s.n() {
        return Err(SynthesisError::Precondition(format!(
            "system dimension {} does not match the safe set dimension {}",
            sys.n(),
            s.n()
        )));
    }
    if controller.m() != sys.m() {
        return Err(SynthesisError::Precondition(format!(
            "controller outputs {} inputs, the system takes {}",
            controller.m(),
            sys.m()
        )));
    }
    let fo = flow::flow_out(s, VERIFY_T0, VERIFY_T1)?;
    let region = fo.shifted;
    let h_fn = s.h_fn()?;
    let grad_fn = s.grad_fn()?;
    let region_h = region.h_fn()?;

    let mut pts = raster_grid(&region)?;
    let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED);
    let mut tries = 0usize;
    while pts.len() < VERIFY_MIN_SAMPLES && tries < 1000 * VERIFY_MIN_SAMPLES {
        tries += 1;
        let p = region.bbox().sample(&mut rng);
        if region_h(&p)? >= 0.0 {
            pts.push(p);
        }
    }
    if pts.len() < VERIFY_MIN_SAMPLES {
        return Err(SynthesisError::Precondition(format!(
            "could not draw {VERIFY_MIN_SAMPLES} samples of the neighborhood; it may have negligible volume"
        )));
    }

    struct SampleCheck {
        slack: f64,
        weight_dev: Option<f64>,
        bound_gap: Option<f64>,
    }
    let blended = match controller {
        Controller::Blended(b) => Some(b),
        _ => None,
    };
    let checks: Vec<SampleCheck> = pts
        .par_iter()
        .map(|p| -> Result<SampleCheck, SynthesisError> {
            let mut weight_dev = None;
            let mut bound_gap = None;
            let grad = grad_fn(p)?;
            let alpha_h = alpha.eval(h_fn(p)?)?;
            let u = controller.eval(p)?;
            let slack = dot(&grad, &sys.eval_dynamics(p, &u)?) + alpha_h;
            if let Some(b) = blended {
                let w = b.weights(p).ok_or_else(|| SynthesisError::CoverageHole {
                    point: p.clone(),
                })?;
                weight_dev = Some((w.iter().sum::<f64>() - 1.0).abs());
                let mut min_active = f64::INFINITY;
                for (j, patch) in b.patches.iter().enumerate() {
                    if w[j] > 0.0 {
                        let sj =
                            dot(&grad, &sys.eval_dynamics(p, &patch.input)?) + alpha_h;
                        min_active = min_active.min(sj);
                    }
                }
                bound_gap = Some((min_active - slack).max(0.0));
            }
            Ok(SampleCheck {
                slack,
                weight_dev,
                bound_gap,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut min_slack = f64::INFINITY;
    let mut argmin = pts[0].clone();
    let mut max_weight_deviation: Option<f64> = None;
    let mut blend_bound_max_gap: Option<f64> = None;
    for (p, c) in pts.iter().zip(&checks) {
        if c.slack < min_slack {
            min_slack = c.slack;
            argmin = p.clone();
        }
        if let Some(d) = c.weight_dev {
            max_weight_deviation = Some(max_weight_deviation.unwrap_or(0.0).max(d));
        }
        if let Some(g) = c.bound_gap {
            blend_bound_max_gap = Some(blend_bound_max_gap.unwrap_or(0.0).max(g));
        }
    }
    if min_slack <= 0.0 {
        return Err(SynthesisError::StrictnessViolation {
            point: argmin,
            slack: min_slack,
        });
    }
    Ok(StrictnessReport {
        samples: pts.len(),
        min_slack,
        argmin,
        max_weight_deviation,
        blend_bound_max_gap,
        region: format!("neighborhood {{h >= -{VERIFY_T0}}} of the safe set"),
    })
}

//! Zero location and certification for continuous vector fields on compact
//! regular domains: topological degree over boxes, degree-guided
//! subdivision, and the perturbation-sequence argument for tangent fields.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{
    boundary_sample, build_complex_at, build_cubical_complex, classify_boundary, AxisBox,
    BoundarySummary, GeometryError, SafeSet,
};
use crate::opt::{fd_jacobian, levenberg_marquardt};
use crate::system::{norm, SystemError, VectorField};

/// Certified-zero residual bound, relative to the field's sampled scale:
/// tol_zero = 1e-8·scale.
pub const TOL_ZERO_REL: f64 = 1e-8;
/// A degree computation requires min ‖X‖ on the region boundary to exceed
/// this fraction of the sampled scale.
pub const DEGREE_BOUNDARY_REL: f64 = 1e-12;
/// Maximum boundary-sampling refinements before a degree computation gives
/// up.
pub const MAX_REFINEMENTS: usize = 4;
/// Candidate boxes are bisected until their diameter falls below this.
pub const BISECT_DIAMETER: f64 = 1e-6;
/// Default perturbation magnitudes δ = 1/2, 1/4, …, 1/64.
pub const DEFAULT_DELTAS: [f64; 6] = [0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];

#[derive(Debug, Clone, Error)]
pub enum ZerosError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(
        "zero of the field on the region boundary: min ‖X‖ = {boundary_min_norm} \
         (scale {scale}); degree is undefined"
    )]
    ZeroOnBoundary { boundary_min_norm: f64, scale: f64 },
    #[error("degree did not settle after {0} boundary refinements")]
    RefinementLimit(usize),
    #[error("degree computation supports n ∈ {{2, 3}}, got n = {0}")]
    UnsupportedDimension(usize),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("zero location failed for perturbation δ = {delta}")]
    SubLocation { delta: f64 },
}

/// Brouwer degree of a field over a sub-box.
#[derive(Debug, Clone)]
pub struct DegreeResult {
    pub region: AxisBox,
    pub degree: i64,
    /// min ‖X‖ over the sampled region boundary; the degree is only defined
    /// because this is positive.
    pub boundary_min_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ZeroMethod {
    /// Isolated by a nonzero degree over the enclosing box.
    DegreeIsolation,
    /// Limit of a perturbation sequence (tangent-case argument).
    PerturbationLimit,
    /// Best-effort minimization of ‖X‖² with no degree certificate
    /// (n ≥ 4, or boxes whose degree could not be resolved).
    MinimizationOnly,
}

/// A certified zero: ‖X(point)‖ = residual ≤ 1e-8·scale.
#[derive(Debug, Clone, Serialize)]
pub struct ZeroCertificate {
    pub point: Vec<f64>,
    pub residual: f64,
    pub method: ZeroMethod,
    #[serde(rename = "box")]
    pub region: AxisBox,
    /// Heuristic isolation label: false when ‖X‖ nearly vanishes on a small
    /// sphere around the point (zero continua, degenerate zeros).
    pub isolated_heuristic: bool,
}

impl ZeroCertificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("certificate serialization cannot fail")
    }
}

/// Brouwer degree of X over `region` from the field's direction on the
/// region boundary.
///
/// n = 2: winding number from accumulated angle increments, each step's
/// |Δθ| < π/2 (refining the boundary sampling up to 4 times otherwise).
/// n = 3: signed solid-angle accumulation of the normalized field over the
/// triangulated box surface; the accumulated total must round to an integer
/// with residual < 0.1.
pub fn topological_degree(
    field: &VectorField,
    region: &AxisBox,
    samples_per_face: usize,
) -> Result<DegreeResult, ZerosError> {
    let n = region.dim();
    let spf = samples_per_face.max(4);
    match n {
        2 => degree_2d(field, region, spf),
        3 => degree_3d(field, region, spf),
        other => Err(ZerosError::UnsupportedDimension(other)),
    }
}

fn degree_2d(
    field: &VectorField,
    region: &AxisBox,
    spf: usize,
) -> Result<DegreeResult, ZerosError> {
    let (lo, hi) = (region.lower(), region.upper());
    let w = region.widths();
    for attempt in 0..=MAX_REFINEMENTS {
        let m = spf << attempt;
        // Counterclockwise boundary loop, m samples per edge.
        let mut pts = Vec::with_capacity(4 * m);
        for j in 0..m {
            let t = j as f64 / m as f64;
            pts.push(vec![lo[0] + t * w[0], lo[1]]);
        }
        for j in 0..m {
            let t = j as f64 / m as f64;
            pts.push(vec![hi[0], lo[1] + t * w[1]]);
        }
        for j in 0..m {
            let t = j as f64 / m as f64;
            pts.push(vec![hi[0] - t * w[0], hi[1]]);
        }
        for j in 0..m {
            let t = j as f64 / m as f64;
            pts.push(vec![lo[0], hi[1] - t * w[1]]);
        }
        let vals: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| field.eval(p))
            .collect::<Result<_, _>>()?;
        let mut min_norm = f64::INFINITY;
        let mut scale = 0.0f64;
        for v in &vals {
            let nv = norm(v);
            min_norm = min_norm.min(nv);
            scale = scale.max(nv);
        }
        if min_norm <= DEGREE_BOUNDARY_REL * scale || scale == 0.0 {
            return Err(ZerosError::ZeroOnBoundary {
                boundary_min_norm: min_norm,
                scale,
            });
        }
        let mut total = 0.0f64;
        let mut coarse = false;
        for i in 0..vals.len() {
            let a = &vals[i];
            let b = &vals[(i + 1) % vals.len()];
            let cross = a[0] * b[1] - a[1] * b[0];
            let dot = a[0] * b[0] + a[1] * b[1];
            let dtheta = cross.atan2(dot);
            if dtheta.abs() >= std::f64::consts::FRAC_PI_2 {
                coarse = true;
                break;
            }
            total += dtheta;
        }
        if coarse {
            continue;
        }
        let raw = total / (2.0 * std::f64::consts::PI);
        let degree = raw.round();
        if (raw - degree).abs() >= 0.1 {
            continue;
        }
        return Ok(DegreeResult {
            region: region.clone(),
            degree: degree as i64,
            boundary_min_norm: min_norm,
        });
    }
    Err(ZerosError::RefinementLimit(MAX_REFINEMENTS))
}

/// Signed solid angle subtended by the unit vectors u1, u2, u3.
fn solid_angle(u1: &[f64], u2: &[f64], u3: &[f64]) -> f64 {
    let triple = u1[0] * (u2[1] * u3[2] - u2[2] * u3[1])
        - u1[1] * (u2[0] * u3[2] - u2[2] * u3[0])
        + u1[2] * (u2[0] * u3[1] - u2[1] * u3[0]);
    let d12: f64 = u1.iter().zip(u2).map(|(a, b)| a * b).sum();
    let d23: f64 = u2.iter().zip(u3).map(|(a, b)| a * b).sum();
    let d31: f64 = u3.iter().zip(u1).map(|(a, b)| a * b).sum();
    2.0 * triple.atan2(1.0 + d12 + d23 + d31)
}

fn degree_3d(
    field: &VectorField,
    region: &AxisBox,
    spf: usize,
) -> Result<DegreeResult, ZerosError> {
    let (lo, hi) = (region.lower(), region.upper());
    let w = region.widths();
    // Sign of e_b × e_c relative to e_a for the two free axes b < c.
    let axis_sign = |a: usize| -> f64 {
        match a {
            0 => 1.0,  // e1 × e2 = +e0
            1 => -1.0, // e0 × e2 = −e1
            _ => 1.0,  // e0 × e1 = +e2
        }
    };
    for attempt in 0..=MAX_REFINEMENTS {
        let m = spf << attempt;
        let mut total = 0.0f64;
        let mut min_norm = f64::INFINITY;
        let mut scale = 0.0f64;
        for a in 0..3 {
            let (b, c) = match a {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            for upper in [false, true] {
                // Normalized field on an (m+1)×(m+1) vertex grid of the face.
                let mut units = vec![vec![0.0f64; 3]; (m + 1) * (m + 1)];
                for i in 0..=m {
                    for j in 0..=m {
                        let mut p = vec![0.0; 3];
                        p[a] = if upper { hi[a] } else { lo[a] };
                        p[b] = lo[b] + w[b] * i as f64 / m as f64;
                        p[c] = lo[c] + w[c] * j as f64 / m as f64;
                        let v = field.eval(&p)?;
                        let nv = norm(&v);
                        min_norm = min_norm.min(nv);
                        scale = scale.max(nv);
                        if nv > 0.0 {
                            units[i * (m + 1) + j] = v.iter().map(|x| x / nv).collect();
                        }
                    }
                }
                if min_norm <= DEGREE_BOUNDARY_REL * scale.max(f64::MIN_POSITIVE) {
                    return Err(ZerosError::ZeroOnBoundary {
                        boundary_min_norm: min_norm,
                        scale,
                    });
                }
                let orient = axis_sign(a) * if upper { 1.0 } else { -1.0 };
                for i in 0..m {
                    for j in 0..m {
                        let v00 = &units[i * (m + 1) + j];
                        let v10 = &units[(i + 1) * (m + 1) + j];
                        let v11 = &units[(i + 1) * (m + 1) + j + 1];
                        let v01 = &units[i * (m + 1) + j + 1];
                        if orient > 0.0 {
                            total += solid_angle(v00, v10, v11);
                            total += solid_angle(v00, v11, v01);
                        } else {
                            total += solid_angle(v00, v11, v10);
                            total += solid_angle(v00, v01, v11);
                        }
                    }
                }
            }
        }
        let raw = total / (4.0 * std::f64::consts::PI);
        let degree = raw.round();
        if (raw - degree).abs() >= 0.1 {
            continue;
        }
        return Ok(DegreeResult {
            region: region.clone(),
            degree: degree as i64,
            boundary_min_norm: min_norm,
        });
    }
    Err(ZerosError::RefinementLimit(MAX_REFINEMENTS))
}

/// The inward-pointing gradient perturbation Y = grad h/(1 + ‖grad h‖):
/// dh·Y = ‖grad h‖²/(1 + ‖grad h‖) > 0 wherever h is regular, so Y points
/// into C = h⁻¹(ℝ≥0) everywhere on ∂C.
pub fn inward_gradient_field(s: &SafeSet) -> Result<VectorField, ZerosError> {
    let grad = s.grad_fn()?;
    Ok(VectorField::new(
        s.n(),
        "grad h / (1 + |grad h|)",
        move |p| {
            let g = grad(p).map_err(SystemError::from)?;
            let gn = norm(&g);
            Ok(g.iter().map(|v| v / (1.0 + gn)).collect())
        },
    ))
}

const DEGREE_SPF_LOCATE: usize = 24;
const JITTER_EXPANSIONS: usize = 4;

/// Locates and certifies zeros of the field inside the safe set.
///
/// Over the cells of S's cubical complex: boxes whose corner norms exceed a
/// sampled Lipschitz bound times the diameter are pruned; surviving boxes
/// with nonzero degree are bisected (jittered splits, longest axis) to
/// diameter ≤ 1e-6, and the final center is polished by damped Newton on
/// ‖X‖² to residual ≤ 1e-8·scale. Boxes whose degree cannot be resolved
/// (zeros straddling every jittered boundary — continua) fall back to
/// best-effort minimization. Returns an empty list when nothing certifies:
/// callers combining this with χ ≠ 0 and an inward/tangent boundary must
/// flag that loudly, since existence is then guaranteed.
pub fn locate_zeros(
    field: &VectorField,
    s: &SafeSet,
) -> Result<Vec<ZeroCertificate>, ZerosError> {
    let n = s.n();
    if n >= 4 {
        return locate_multistart(field, s);
    }
    let complex = build_complex_at(s, s.resolution())?;
    let cells = complex.top_cells();
    if cells.is_empty() {
        return Ok(Vec::new());
    }

    // Prune pass: corner/center norms vs. Lipschitz estimate.
    struct Candidate {
        cell: AxisBox,
    }
    let pruned: Vec<Result<(Option<Candidate>, f64), ZerosError>> = cells
        .par_iter()
        .map(|idx| {
            let cell = complex.cell_box(idx);
            let mut min_norm = f64::INFINITY;
            let mut max_norm = 0.0f64;
            let (lo, hi) = (cell.lower(), cell.upper());
            for corner in 0..(1usize << n) {
                let p: Vec<f64> = (0..n)
                    .map(|a| if (corner >> a) & 1 == 1 { hi[a] } else { lo[a] })
                    .collect();
                let nv = norm(&field.eval(&p)?);
                min_norm = min_norm.min(nv);
                max_norm = max_norm.max(nv);
            }
            let center = cell.center();
            let nv = norm(&field.eval(&center)?);
            min_norm = min_norm.min(nv);
            max_norm = max_norm.max(nv);
            // Sampled Lipschitz estimate with a 2× safety factor; a false
            // non-prune only costs time.
            let f = |p: &[f64]| field.eval(p);
            let jac = fd_jacobian(&f, &center, 0.05)?;
            let lip = 2.0 * jac.norm();
            let keep = min_norm <= lip * cell.diagonal();
            Ok((keep.then_some(Candidate { cell }), max_norm))
        })
        .collect();

    let mut candidates = Vec::new();
    let mut scale = 0.0f64;
    for r in pruned {
        let (cand, mx) = r?;
        scale = scale.max(mx);
        if let Some(c) = cand {
            candidates.push(c);
        }
    }
    let tol_zero = TOL_ZERO_REL * scale.max(f64::MIN_POSITIVE);

    // Degree per candidate (with jittered expansion when a zero sits on the
    // cell boundary), then bisection on the nonzero ones.
    let located: Vec<Result<Vec<ZeroCertificate>, ZerosError>> = candidates
        .par_iter()
        .map(|cand| {
            let mut certs = Vec::new();
            match boxed_degree(field, &cand.cell) {
                Some(result) => {
                    if result.0 != 0 {
                        let mut finals = Vec::new();
                        bisect_nonzero(field, result.1, 0, &mut finals)?;
                        for b in finals {
                            if let Some(cert) =
                                polish(field, &b, tol_zero, ZeroMethod::DegreeIsolation)?
                            {
                                certs.push(cert);
                            }
                        }
                    }
                }
                None => {
                    // Unresolvable degree: zeros on every jittered boundary.
                    if let Some(cert) =
                        polish(field, &cand.cell, tol_zero, ZeroMethod::MinimizationOnly)?
                    {
                        certs.push(cert);
                    }
                }
            }
            Ok(certs)
        })
        .collect();

    let mut all = Vec::new();
    for r in located {
        all.extend(r?);
    }
    Ok(dedupe(all))
}

/// Degree of the field over the cell, expanding the box by small jittered
/// factors when a boundary zero blocks the computation. Returns None when
/// every expansion fails.
fn boxed_degree(field: &VectorField, cell: &AxisBox) -> Option<(i64, AxisBox)> {
    for k in 0..JITTER_EXPANSIONS {
        let f = 1.0 + 0.013 * (k + 1) as f64;
        let c = cell.center();
        let lo: Vec<f64> = (0..cell.dim())
            .map(|a| c[a] - f * 0.5 * (cell.upper()[a] - cell.lower()[a]))
            .collect();
        let hi: Vec<f64> = (0..cell.dim())
            .map(|a| c[a] + f * 0.5 * (cell.upper()[a] - cell.lower()[a]))
            .collect();
        let expanded = AxisBox::new(lo, hi).expect("expanded cell bounds are ordered");
        match topological_degree(field, &expanded, DEGREE_SPF_LOCATE) {
            Ok(d) => return Some((d.degree, expanded)),
            Err(_) => continue,
        }
    }
    None
}

/// Recursively bisects a nonzero-degree box (longest axis, split ratios
/// jittered between 0.37 and 0.61 by depth so the zero cannot sit on every
/// cut) until the diameter is below `BISECT_DIAMETER`.
fn bisect_nonzero(
    field: &VectorField,
    region: AxisBox,
    depth: usize,
    out: &mut Vec<AxisBox>,
) -> Result<(), ZerosError> {
    if region.diagonal() <= BISECT_DIAMETER || depth > 400 {
        out.push(region);
        return Ok(());
    }
    let widths = region.widths();
    let axis = (0..region.dim())
        .max_by(|&a, &b| widths[a].partial_cmp(&widths[b]).unwrap())
        .unwrap();
    let base = if depth.is_multiple_of(2) { 0.37 } else { 0.61 };
    for k in 0..4 {
        let r = base + 0.05 * k as f64;
        let split = region.lower()[axis] + r * widths[axis];
        let mut hi_a = region.upper().to_vec();
        hi_a[axis] = split;
        let mut lo_b = region.lower().to_vec();
        lo_b[axis] = split;
        let child_a = AxisBox::new(region.lower().to_vec(), hi_a).expect("ordered");
        let child_b = AxisBox::new(lo_b, region.upper().to_vec()).expect("ordered");
        let da = topological_degree(field, &child_a, DEGREE_SPF_LOCATE);
        let db = topological_degree(field, &child_b, DEGREE_SPF_LOCATE);
        match (da, db) {
            (Ok(da), Ok(db)) => {
                if da.degree != 0 {
                    bisect_nonzero(field, child_a, depth + 1, out)?;
                }
                if db.degree != 0 {
                    bisect_nonzero(field, child_b, depth + 1, out)?;
                }
                return Ok(());
            }
            _ => continue, // zero on the cut; jitter the ratio and retry
        }
    }
    // Could not split cleanly; keep the whole box for polishing.
    out.push(region);
    Ok(())
}

/// Newton/Gauss–Newton polish of the box center; certifies only when the
/// residual meets tol_zero.
fn polish(
    field: &VectorField,
    region: &AxisBox,
    tol_zero: f64,
    method: ZeroMethod,
) -> Result<Option<ZeroCertificate>, ZerosError> {
    let f = |p: &[f64]| field.eval(p);
    let (point, residual) = levenberg_marquardt(&f, &region.center(), 0.1 * tol_zero, 100)?;
    if residual > tol_zero {
        return Ok(None);
    }
    let isolated = isolation_heuristic(field, &point, tol_zero)?;
    Ok(Some(ZeroCertificate {
        point,
        residual,
        method,
        region: region.clone(),
        isolated_heuristic: isolated,
    }))
}

/// Samples ‖X‖ on a small sphere around the point; a near-vanishing minimum
/// marks the zero "non-isolated (heuristic)".
fn isolation_heuristic(
    field: &VectorField,
    point: &[f64],
    tol_zero: f64,
) -> Result<bool, ZerosError> {
    const RHO: f64 = 1e-3;
    let n = point.len();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    if n == 2 {
        for k in 0..16 {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 16.0;
            dirs.push(vec![th.cos(), th.sin()]);
        }
    } else {
        // Normalized lattice directions {-1,0,1}^n \ {0}.
        let total = 3usize.pow(n as u32);
        for code in 0..total {
            let mut d = Vec::with_capacity(n);
            let mut c = code;
            for _ in 0..n {
                d.push((c % 3) as f64 - 1.0);
                c /= 3;
            }
            let dn = norm(&d);
            if dn > 0.0 {
                dirs.push(d.iter().map(|v| v / dn).collect());
            }
        }
    }
    let mut min_norm = f64::INFINITY;
    for d in dirs {
        let p: Vec<f64> = (0..n).map(|i| point[i] + RHO * d[i]).collect();
        min_norm = min_norm.min(norm(&field.eval(&p)?));
    }
    Ok(min_norm >= 1e3 * tol_zero)
}

/// Deduplicates certificates that refer to the same zero (within 1e-4
/// relative distance), keeping the first in lexicographic point order.
fn dedupe(mut certs: Vec<ZeroCertificate>) -> Vec<ZeroCertificate> {
    certs.sort_by(|a, b| {
        a.point
            .partial_cmp(&b.point)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out: Vec<ZeroCertificate> = Vec::new();
    for c in certs {
        let dup = out
            .iter()
            .any(|k| crate::system::dist(&k.point, &c.point) <= 1e-4 * (1.0 + norm(&c.point)));
        if !dup {
            out.push(c);
        }
    }
    out
}

/// Best-effort multi-start minimization for n ≥ 4, where no cubical complex
/// or degree is available. Certificates carry `MinimizationOnly`.
fn locate_multistart(
    field: &VectorField,
    s: &SafeSet,
) -> Result<Vec<ZeroCertificate>, ZerosError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let h = s.h_fn()?;
    let mut starts = Vec::new();
    let mut scale = 0.0f64;
    let mut attempts = 0;
    while starts.len() < 128 && attempts < 100_000 {
        attempts += 1;
        let p = s.bbox().sample(&mut rng);
        scale = scale.max(norm(&field.eval(&p)?));
        if h(&p).map_err(GeometryError::from)? >= 0.0 {
            starts.push(p);
        }
    }
    if starts.is_empty() {
        return Ok(Vec::new());
    }
    let tol_zero = TOL_ZERO_REL * scale.max(f64::MIN_POSITIVE);
    let f = |p: &[f64]| field.eval(p);
    let mut certs = Vec::new();
    for p0 in &starts {
        let (point, residual) = levenberg_marquardt(&f, p0, 0.1 * tol_zero, 200)?;
        if residual <= tol_zero && h(&point).map_err(GeometryError::from)? >= 0.0 {
            let half = 1e-6;
            let region = AxisBox::new(
                point.iter().map(|v| v - half).collect(),
                point.iter().map(|v| v + half).collect(),
            )
            .expect("ordered");
            let isolated = isolation_heuristic(field, &point, tol_zero)?;
            certs.push(ZeroCertificate {
                point,
                residual,
                method: ZeroMethod::MinimizationOnly,
                region,
                isolated_heuristic: isolated,
            });
        }
    }
    Ok(dedupe(certs))
}

/// Result of the perturbation-sequence argument.
#[derive(Debug, Clone)]
pub struct PerturbationSequence {
    /// (δ, certified zero of X + δY) for each requested δ.
    pub per_delta: Vec<(f64, ZeroCertificate)>,
    /// The last (smallest-δ) zero, standing in for the sequence limit.
    pub limit: Vec<f64>,
    /// ‖X(limit)‖ for the unperturbed field.
    pub residual_at_limit: f64,
    /// Distances between consecutive sequence points.
    pub cauchy_gaps: Vec<f64>,
}

/// For each δ in a positive decreasing sequence, locates a zero of X + δY,
/// where Y points inward at ∂C; the final point reproduces the compactness
/// limit argument numerically.
pub fn perturbation_sequence_zero(
    field: &VectorField,
    inward: &VectorField,
    s: &SafeSet,
    deltas: &[f64],
) -> Result<PerturbationSequence, ZerosError> {
    if deltas.is_empty() || deltas.windows(2).any(|w| w[1] >= w[0]) || deltas[0] <= 0.0 {
        return Err(ZerosError::Precondition(
            "deltas must be positive and strictly decreasing".into(),
        ));
    }
    if *deltas.last().unwrap() <= 0.0 {
        return Err(ZerosError::Precondition("deltas must be positive".into()));
    }
    let boundary = boundary_sample(s, 100)?;
    let (_, summary) = classify_boundary(s, inward, &boundary.points)?;
    if summary != BoundarySummary::AllInward {
        return Err(ZerosError::Precondition(format!(
            "perturbation field Y must be inward-pointing on all of ∂C, got {summary}"
        )));
    }

    let mut per_delta = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    let mut gaps = Vec::new();
    for &delta in deltas {
        let perturbed = field.add_scaled(inward, delta);
        let (_, psummary) = classify_boundary(s, &perturbed, &boundary.points)?;
        if psummary != BoundarySummary::AllInward {
            return Err(ZerosError::Precondition(format!(
                "perturbed field X + {delta}·Y is not inward-pointing on ∂C ({psummary}); \
                 X must be inward or tangent for the sequence argument"
            )));
        }
        let certs = locate_zeros(&perturbed, s)?;
        if certs.is_empty() {
            return Err(ZerosError::SubLocation { delta });
        }
        // Track the zero nearest the previous one for a coherent sequence.
        let chosen = match &prev {
            Some(p) => certs
                .into_iter()
                .min_by(|a, b| {
                    crate::system::dist(&a.point, p)
                        .partial_cmp(&crate::system::dist(&b.point, p))
                        .unwrap()
                })
                .unwrap(),
            None => certs.into_iter().next().unwrap(),
        };
        if let Some(p) = &prev {
            gaps.push(crate::system::dist(&chosen.point, p));
        }
        prev = Some(chosen.point.clone());
        per_delta.push((delta, chosen));
    }
    let limit = prev.unwrap();
    let residual_at_limit = norm(&field.eval(&limit)?);
    Ok(PerturbationSequence {
        per_delta,
        limit,
        residual_at_limit,
        cauchy_gaps: gaps,
    })
}

/// Report from [`verify_poincare_hopf`].
#[derive(Debug, Clone)]
pub struct PoincareHopfReport {
    pub chi: i64,
    pub summary: BoundarySummary,
    /// χ ≠ 0 together with an inward-or-tangent boundary: the hypotheses
    /// under which a zero must exist.
    pub hypotheses_met: bool,
    pub certificates: Vec<ZeroCertificate>,
    pub used_perturbation: bool,
    /// Set when the hypotheses hold and still no zero certified — a loud
    /// numerical failure, since existence is guaranteed.
    pub theorem_contradiction: bool,
    pub warnings: Vec<String>,
}

/// Full pipeline for the zero-existence statement: χ of C, boundary
/// classification of X, then zero certification (directly for inward
/// fields, through the δ-sequence with Y = grad h/(1+‖grad h‖) when
/// tangencies are present).
pub fn verify_poincare_hopf(
    field: &VectorField,
    s: &SafeSet,
) -> Result<PoincareHopfReport, ZerosError> {
    let mut warnings = Vec::new();
    let chi = build_cubical_complex(s)?.euler_characteristic();
    let boundary = boundary_sample(s, 100)?;
    warnings.extend(boundary.warnings.iter().cloned());
    let (_, summary) = classify_boundary(s, field, &boundary.points)?;
    let hypotheses_met = chi != 0
        && matches!(
            summary,
            BoundarySummary::AllInward | BoundarySummary::InwardOrTangent
        );

    let mut used_perturbation = false;
    let certificates = if hypotheses_met && summary == BoundarySummary::InwardOrTangent {
        used_perturbation = true;
        let y = inward_gradient_field(s)?;
        let seq = perturbation_sequence_zero(field, &y, s, &DEFAULT_DELTAS)?;
        let last = seq.per_delta.last().unwrap().1.clone();
        vec![ZeroCertificate {
            point: seq.limit,
            residual: seq.residual_at_limit,
            method: ZeroMethod::PerturbationLimit,
            region: last.region,
            isolated_heuristic: last.isolated_heuristic,
        }]
    } else {
        locate_zeros(field, s)?
    };

    let theorem_contradiction = hypotheses_met && certificates.is_empty();
    if theorem_contradiction {
        warnings.push(
            "zero existence is guaranteed (χ ≠ 0, inward-or-tangent boundary) but none was \
             certified — numerical failure"
                .into(),
        );
    }
    Ok(PoincareHopfReport {
        chi,
        summary,
        hypotheses_met,
        certificates,
        used_perturbation,
        theorem_contradiction,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;
    use crate::geometry::AxisBox;

    fn field2(e1: &str, e2: &str) -> VectorField {
        VectorField::from_exprs(&[parse(e1).unwrap(), parse(e2).unwrap()]).unwrap()
    }

    fn disk(h: &str, res: usize) -> SafeSet {
        SafeSet::new(parse(h).unwrap(), AxisBox::centered_cube(2, 2.0), res).unwrap()
    }

    #[test]
    fn degree_2d_standard_fields() {
        let b = AxisBox::centered_cube(2, 1.0);
        let d = topological_degree(&field2("-x1", "-x2"), &b, 16).unwrap();
        assert_eq!(d.degree, 1);
        assert!(d.boundary_min_norm > 0.9);
        let d = topological_degree(&field2("x1", "x2"), &b, 16).unwrap();
        assert_eq!(d.degree, 1);
        let d = topological_degree(&field2("x1", "-x2"), &b, 16).unwrap();
        assert_eq!(d.degree, -1);
        let d = topological_degree(&field2("1", "0"), &b, 16).unwrap();
        assert_eq!(d.degree, 0);
    }

    #[test]
    fn degree_2d_rejects_boundary_zero() {
        // Zero at (1, 0), exactly on the box boundary.
        let f = field2("x1 - 1", "x2");
        match topological_degree(&f, &AxisBox::centered_cube(2, 1.0), 16) {
            Err(ZerosError::ZeroOnBoundary { .. }) => {}
            other => panic!("expected boundary-zero error, got {other:?}"),
        }
    }

    #[test]
    fn degree_3d_standard_fields() {
        let b = AxisBox::centered_cube(3, 1.0);
        let neg = VectorField::from_exprs(&[
            parse("-x1").unwrap(),
            parse("-x2").unwrap(),
            parse("-x3").unwrap(),
        ])
        .unwrap();
        assert_eq!(topological_degree(&neg, &b, 12).unwrap().degree, -1);
        let pos = VectorField::from_exprs(&[
            parse("x1").unwrap(),
            parse("x2").unwrap(),
            parse("x3").unwrap(),
        ])
        .unwrap();
        assert_eq!(topological_degree(&pos, &b, 12).unwrap().degree, 1);
        let saddle = VectorField::from_exprs(&[
            parse("x1").unwrap(),
            parse("x2").unwrap(),
            parse("-x3").unwrap(),
        ])
        .unwrap();
        assert_eq!(topological_degree(&saddle, &b, 12).unwrap().degree, -1);
        let constant = VectorField::from_exprs(&[
            parse("1").unwrap(),
            parse("0.5").unwrap(),
            parse("0").unwrap(),
        ])
        .unwrap();
        assert_eq!(topological_degree(&constant, &b, 12).unwrap().degree, 0);
    }

    #[test]
    fn degree_additivity_across_a_split() {
        let f = field2("-x1", "-x2");
        let parent = AxisBox::centered_cube(2, 1.0);
        let left = AxisBox::new(vec![-1.0, -1.0], vec![0.3, 1.0]).unwrap();
        let right = AxisBox::new(vec![0.3, -1.0], vec![1.0, 1.0]).unwrap();
        let dp = topological_degree(&f, &parent, 32).unwrap().degree;
        let dl = topological_degree(&f, &left, 32).unwrap().degree;
        let dr = topological_degree(&f, &right, 32).unwrap().degree;
        assert_eq!(dp, dl + dr);
        assert_eq!((dl, dr), (1, 0));
    }

    #[test]
    fn degree_homotopy_invariance() {
        let f = field2("-x1", "-x2");
        let w = field2("cos(x1)", "sin(x2) + 0.5");
        let b = AxisBox::centered_cube(2, 1.0);
        let base = topological_degree(&f, &b, 32).unwrap();
        // Perturbation small enough that the boundary norm stays positive.
        let mut max_w = 0.0f64;
        for k in 0..64 {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
            let p = vec![th.cos(), th.sin()];
            max_w = max_w.max(norm(&w.eval(&p).unwrap()));
        }
        let eps = 0.1 * base.boundary_min_norm / max_w;
        let perturbed = f.add_scaled(&w, eps);
        let d = topological_degree(&perturbed, &b, 32).unwrap();
        assert_eq!(d.degree, base.degree);
    }

    #[test]
    fn locate_linear_sink_on_disk() {
        let s = disk("1 - x1^2 - x2^2", 64);
        let certs = locate_zeros(&field2("-x1", "-x2"), &s).unwrap();
        assert_eq!(certs.len(), 1, "{certs:?}");
        let c = &certs[0];
        assert!(norm(&c.point) < 1e-7, "zero at {:?}", c.point);
        assert!(c.residual <= TOL_ZERO_REL * 2.0_f64.hypot(2.0) * 2.0);
        assert_eq!(c.method, ZeroMethod::DegreeIsolation);
        assert!(c.isolated_heuristic);
        // Residual reproducibility.
        let re = norm(&field2("-x1", "-x2").eval(&c.point).unwrap());
        assert!((re - c.residual).abs() <= 1e-12);
    }

    #[test]
    fn locate_spiral_sink() {
        let f = field2("-x2 - 0.1*x1", "x1 - 0.1*x2");
        let s = disk("1 - x1^2 - x2^2", 64);
        let certs = locate_zeros(&f, &s).unwrap();
        assert_eq!(certs.len(), 1);
        assert!(norm(&certs[0].point) < 1e-7);
    }

    #[test]
    fn locate_cleared_denominator_ring_field() {
        // x·(‖x‖ − 1): the continuous representative of the closed loop
        // x − x/‖x‖ (positive rescaling by ‖x‖ preserves the zero set).
        // Zeros are the origin and the unit circle; on the radius-0.9 disk
        // only the origin remains.
        let f = field2(
            "x1*(sqrt(x1^2 + x2^2) - 1)",
            "x2*(sqrt(x1^2 + x2^2) - 1)",
        );
        let s = disk("0.81 - x1^2 - x2^2", 64);
        let certs = locate_zeros(&f, &s).unwrap();
        assert_eq!(certs.len(), 1, "{certs:?}");
        assert!(norm(&certs[0].point) < 1e-7);
    }

    #[test]
    fn certificate_json_round_trip() {
        let s = disk("1 - x1^2 - x2^2", 32);
        let certs = locate_zeros(&field2("-x1", "-x2"), &s).unwrap();
        let json = certs[0].to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["point"].is_array());
        assert!(v["residual"].is_number());
        assert_eq!(v["method"], "DegreeIsolation");
        assert!(v["box"]["lower"].is_array());
    }

    #[test]
    fn perturbation_sequence_tangent_rotation() {
        let s = disk("1 - x1^2 - x2^2", 64);
        let rot = field2("-x2", "x1");
        let y = inward_gradient_field(&s).unwrap();
        let seq = perturbation_sequence_zero(&rot, &y, &s, &DEFAULT_DELTAS).unwrap();
        assert_eq!(seq.per_delta.len(), DEFAULT_DELTAS.len());
        for (_, cert) in &seq.per_delta {
            assert!(norm(&cert.point) < 1e-6, "zero at {:?}", cert.point);
        }
        assert!(seq.residual_at_limit <= 1e-6);
        assert!(seq.cauchy_gaps.iter().all(|g| *g < 1e-5));
    }

    #[test]
    fn perturbation_zero_field() {
        let s = disk("1 - x1^2 - x2^2", 32);
        let zero = VectorField::new(2, "0", |_| Ok(vec![0.0, 0.0]));
        let y = field2("-x1", "-x2");
        let seq = perturbation_sequence_zero(&zero, &y, &s, &[0.5, 0.25]).unwrap();
        assert!(norm(&seq.limit) < 1e-7);
        assert_eq!(seq.residual_at_limit, 0.0);
    }

    #[test]
    fn perturbation_rejects_outward_base_field() {
        let s = disk("1 - x1^2 - x2^2", 32);
        let x = field2("x1", "x2");
        let y = field2("-x1", "-x2");
        match perturbation_sequence_zero(&x, &y, &s, &[0.5, 0.25]) {
            Err(ZerosError::Precondition(msg)) => {
                assert!(msg.contains("inward"), "{msg}");
            }
            other => panic!("expected precondition error, got {other:?}"),
        }
    }

    #[test]
    fn poincare_hopf_inward_disk() {
        let s = disk("1 - x1^2 - x2^2", 64);
        let report = verify_poincare_hopf(&field2("-x1", "-x2"), &s).unwrap();
        assert_eq!(report.chi, 1);
        assert_eq!(report.summary, BoundarySummary::AllInward);
        assert!(report.hypotheses_met);
        assert!(!report.used_perturbation);
        assert!(!report.theorem_contradiction);
        assert_eq!(report.certificates.len(), 1);
        assert!(norm(&report.certificates[0].point) < 1e-7);
    }

    #[test]
    fn poincare_hopf_annulus_constant_field() {
        let s = disk("0.25 - (sqrt(x1^2 + x2^2) - 0.75)^2", 64);
        let report = verify_poincare_hopf(&field2("1", "0"), &s).unwrap();
        assert_eq!(report.chi, 0);
        assert!(!report.hypotheses_met);
        assert!(!report.theorem_contradiction);
        assert!(report.certificates.is_empty());
    }

    #[test]
    fn poincare_hopf_tangent_rotation() {
        let s = disk("1 - x1^2 - x2^2", 64);
        let report = verify_poincare_hopf(&field2("-x2", "x1"), &s).unwrap();
        assert_eq!(report.chi, 1);
        assert_eq!(report.summary, BoundarySummary::InwardOrTangent);
        assert!(report.hypotheses_met);
        assert!(report.used_perturbation);
        assert_eq!(report.certificates.len(), 1);
        let c = &report.certificates[0];
        assert_eq!(c.method, ZeroMethod::PerturbationLimit);
        assert!(norm(&c.point) < 1e-6);
        assert!(c.residual <= 1e-6);
    }

    #[test]
    fn random_inward_polynomial_fields_have_certified_zeros() {
        use rand::{Rng, SeedableRng};
        let s = disk("1 - x1^2 - x2^2", 64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..8 {
            // X = q·grad h + s·rot(grad h) with q > 0: inward on ∂C since
            // dh·X = q‖grad h‖², and X = -2(qI + sJ)x has det > 0, so the
            // origin is the unique zero.
            let a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let b: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let field = VectorField::new(2, format!("random inward #{trial}"), move |p| {
                let (x, y) = (p[0], p[1]);
                let q = 0.2 + a[0] * x * x + a[1] * y * y + a[2] * (x + y) * (x + y);
                let t = b[0] + b[1] * x + b[2] * y;
                let (gx, gy) = (-2.0 * x, -2.0 * y);
                Ok(vec![q * gx + t * -gy, q * gy + t * gx])
            });
            let report = verify_poincare_hopf(&field, &s).unwrap();
            assert!(report.hypotheses_met, "trial {trial}");
            assert!(
                !report.certificates.is_empty(),
                "trial {trial}: no zero certified"
            );
            assert!(!report.theorem_contradiction);
        }
    }
}

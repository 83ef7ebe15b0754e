//! Safe sets C = h⁻¹(ℝ≥0), cubical complexes, Euler characteristics, and
//! boundary classification of vector fields.

mod complex;

pub use complex::{build_complex_at, build_cubical_complex, CubicalComplex};

use thiserror::Error;

use crate::dsl::{gradient, DslError, Expr};
use crate::system::{norm, SystemError, VectorField};

/// Minimum gradient norm on the sampled zero set for zero to count as a
/// regular value.
pub const EPS_REG: f64 = 1e-4;
/// Perturbation added to grid values of h that are exactly zero before cell
/// classification.
pub const ETA: f64 = 1e-12;
/// Boundary samples are projected to |h| below this.
pub const TOL_BOUNDARY: f64 = 1e-10;
/// Default grid cells per axis.
pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Debug, Clone, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("invalid safe set: {0}")]
    Invalid(String),
    #[error("Euler characteristic computation supports n in 1..=3, got n = {0}")]
    UnsupportedDimension(usize),
    #[error(
        "resolution too coarse: chi = {coarse_chi} at resolution {coarse_res} \
         but chi = {fine_chi} at resolution {fine_res}"
    )]
    ResolutionTooCoarse {
        coarse_res: usize,
        coarse_chi: i64,
        fine_res: usize,
        fine_chi: i64,
    },
    #[error("zero level set of h not found in the bounding box (C has no boundary there)")]
    EmptyZeroSet,
    #[error("boundary projection failed for {failed} of {total} seeds")]
    NewtonFailures { failed: usize, total: usize },
}

/// An axis-aligned box, used as the search/bounding region for all grid
/// operations.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AxisBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, GeometryError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(GeometryError::Invalid(
                "box bounds must be non-empty and of equal dimension".into(),
            ));
        }
        for i in 0..lower.len() {
            if !(lower[i] < upper[i]) {
                return Err(GeometryError::Invalid(format!(
                    "box must have lower < upper on every axis; axis {i} has [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube [-half, half]^n.
    pub fn centered_cube(n: usize, half: f64) -> Self {
        Self {
            lower: vec![-half; n],
            upper: vec![half; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn widths(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.upper[i] - self.lower[i]).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| 0.5 * (self.lower[i] + self.upper[i]))
            .collect()
    }

    pub fn diagonal(&self) -> f64 {
        norm(&self.widths())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }

    /// Coordinates of the grid vertex with the given per-axis indices on a
    /// `resolution`-cells-per-axis grid.
    pub fn vertex(&self, idx: &[usize], resolution: usize) -> Vec<f64> {
        (0..self.dim())
            .map(|a| {
                self.lower[a] + (self.upper[a] - self.lower[a]) * idx[a] as f64 / resolution as f64
            })
            .collect()
    }

    /// Per-axis grid spacing at the given resolution.
    pub fn spacing(&self, resolution: usize) -> Vec<f64> {
        self.widths().iter().map(|w| w / resolution as f64).collect()
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Uniform sample from the box.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        (0..self.dim())
            .map(|i| rng.random_range(self.lower[i]..self.upper[i]))
            .collect()
    }
}

/// Report from the bounding-box compactness validation (h must be negative
/// on all box faces for C to lie strictly inside).
#[derive(Debug, Clone)]
pub struct CompactnessReport {
    pub holds: bool,
    /// A face point with h ≥ 0, if any was found.
    pub witness: Option<Vec<f64>>,
    pub max_face_value: f64,
}

/// A safe set C = {p : h(p) ≥ 0} together with its analysis bounding box
/// and grid resolution.
#[derive(Debug, Clone)]
pub struct SafeSet {
    h: Expr,
    grad: Vec<Expr>,
    bbox: AxisBox,
    resolution: usize,
    warnings: Vec<String>,
}

impl SafeSet {
    pub fn new(h: Expr, bbox: AxisBox, resolution: usize) -> Result<Self, GeometryError> {
        let n = bbox.dim();
        let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        for v in h.free_vars() {
            if !names.iter().any(|s| s == v) {
                return Err(GeometryError::Invalid(format!(
                    "barrier function uses variable `{v}` outside of the state variables x1..x{n}"
                )));
            }
        }
        if resolution < 2 {
            return Err(GeometryError::Invalid(format!(
                "resolution must be at least 2, got {resolution}"
            )));
        }
        let mut warnings = Vec::new();
        if h.contains_abs() {
            warnings.push(
                "barrier function contains abs(); it is not differentiable at kinks, so \
                 gradient-based checks (regularity, boundary classification) may be unreliable \
                 there"
                    .to_string(),
            );
        }
        let grad = gradient(&h, n);
        Ok(Self {
            h,
            grad,
            bbox,
            resolution,
            warnings,
        })
    }

    pub fn n(&self) -> usize {
        self.bbox.dim()
    }

    pub fn h(&self) -> &Expr {
        &self.h
    }

    pub fn grad_exprs(&self) -> &[Expr] {
        &self.grad
    }

    pub fn bbox(&self) -> &AxisBox {
        &self.bbox
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// The same set with a different grid resolution.
    pub fn with_resolution(&self, resolution: usize) -> Self {
        let mut s = self.clone();
        s.resolution = resolution;
        s
    }

    /// The safe set {h ≥ -shift}, i.e. barrier h + shift. Used for flow-out
    /// neighborhoods C̃ = {h ≥ -t₀}.
    pub fn shifted(&self, shift: f64) -> Result<Self, GeometryError> {
        let h = Expr::Binary(
            crate::dsl::BinOp::Add,
            Box::new(self.h.clone()),
            Box::new(Expr::Const(shift)),
        );
        let mut s = SafeSet::new(h, self.bbox.clone(), self.resolution)?;
        s.warnings = self.warnings.clone();
        Ok(s)
    }

    /// A fast evaluator for h over state slices.
    pub fn h_fn(&self) -> Result<impl Fn(&[f64]) -> Result<f64, DslError> + Send + Sync, GeometryError> {
        let names: Vec<String> = (1..=self.n()).map(|i| format!("x{i}")).collect();
        let bound = self.h.bind(&names)?;
        Ok(move |p: &[f64]| bound.eval(p))
    }

    /// A fast evaluator for grad h over state slices.
    pub fn grad_fn(
        &self,
    ) -> Result<impl Fn(&[f64]) -> Result<Vec<f64>, DslError> + Send + Sync, GeometryError> {
        let names: Vec<String> = (1..=self.n()).map(|i| format!("x{i}")).collect();
        let bound: Vec<_> = self
            .grad
            .iter()
            .map(|e| e.bind(&names))
            .collect::<Result<_, _>>()?;
        Ok(move |p: &[f64]| bound.iter().map(|e| e.eval(p)).collect())
    }

    pub fn h_at(&self, p: &[f64]) -> Result<f64, GeometryError> {
        let b = crate::dsl::Binding::states(p);
        Ok(self.h.eval(&b)?)
    }

    pub fn grad_at(&self, p: &[f64]) -> Result<Vec<f64>, GeometryError> {
        let b = crate::dsl::Binding::states(p);
        self.grad
            .iter()
            .map(|e| e.eval(&b).map_err(GeometryError::from))
            .collect()
    }

    /// Checks that h < 0 on all bounding-box faces, sampling each face on a
    /// `resolution`-per-axis grid. A failure means C may be clipped by the
    /// box, so global topological conclusions do not apply (the set is still
    /// usable for local analyses).
    pub fn compactness_check(&self) -> Result<CompactnessReport, GeometryError> {
        let n = self.n();
        let res = self.resolution;
        let h = self.h_fn()?;
        let mut max_val = f64::NEG_INFINITY;
        let mut witness = None;
        // Each face fixes one axis at its lower or upper bound.
        for axis in 0..n {
            for &side in &[0usize, res] {
                let mut idx = vec![0usize; n];
                idx[axis] = side;
                loop {
                    let p = self.bbox.vertex(&idx, res);
                    let v = h(&p)?;
                    if v > max_val {
                        max_val = v;
                        if v >= 0.0 {
                            witness = Some(p.clone());
                        }
                    }
                    // Advance the free axes odometer-style.
                    let mut a = 0;
                    loop {
                        if a == n {
                            break;
                        }
                        if a == axis {
                            a += 1;
                            continue;
                        }
                        idx[a] += 1;
                        if idx[a] <= res {
                            break;
                        }
                        idx[a] = 0;
                        a += 1;
                    }
                    if a == n {
                        break;
                    }
                }
            }
        }
        Ok(CompactnessReport {
            holds: max_val < 0.0,
            witness,
            max_face_value: max_val,
        })
    }
}

/// Report from [`regular_value_check`].
#[derive(Debug, Clone)]
pub struct RegularValueReport {
    pub min_grad_norm: f64,
    pub witness: Vec<f64>,
    pub pass: bool,
    pub samples: usize,
}

/// Samples the zero level set of h and returns the minimum gradient norm
/// found; the check passes iff that minimum is at least [`EPS_REG`].
pub fn regular_value_check(s: &SafeSet) -> Result<RegularValueReport, GeometryError> {
    let pts = boundary_sample(s, 512)?;
    let mut min_norm = f64::INFINITY;
    let mut witness = Vec::new();
    for p in &pts.points {
        let g = s.grad_at(p)?;
        let gn = norm(&g);
        if gn < min_norm {
            min_norm = gn;
            witness = p.clone();
        }
    }
    Ok(RegularValueReport {
        min_grad_norm: min_norm,
        witness,
        pass: min_norm >= EPS_REG,
        samples: pts.points.len(),
    })
}

/// Points on ∂C produced by [`boundary_sample`], with any per-seed warnings.
#[derive(Debug, Clone)]
pub struct BoundarySample {
    pub points: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl BoundarySample {
    /// CSV export: one row per point, columns x1..xn.
    pub fn to_csv(&self) -> String {
        points_to_csv(&self.points)
    }
}

pub fn points_to_csv(points: &[Vec<f64>]) -> String {
    let mut out = String::new();
    if let Some(first) = points.first() {
        let header: Vec<String> = (1..=first.len()).map(|i| format!("x{i}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
    }
    for p in points {
        let row: Vec<String> = p.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Samples `count` points on the zero level set of h.
///
/// Seeds come from sign changes of h along grid edges; each seed is
/// projected onto {h = 0} by damped Newton steps along grad h until
/// |h| ≤ 1e-10, then points are deduplicated at half the grid spacing. If
/// the initial grid yields too few points the scan is refined (up to 4× the
/// set's resolution). Fails if the zero set is not seen at all, or if more
/// than 10% of seeds fail to converge.
pub fn boundary_sample(s: &SafeSet, count: usize) -> Result<BoundarySample, GeometryError> {
    let mut refine = 1usize;
    let mut result = sample_at(s, s.resolution, count)?;
    while result.points.len() < count && refine < 4 {
        refine *= 2;
        result = sample_at(s, s.resolution * refine, count)?;
    }
    Ok(result)
}

fn sample_at(s: &SafeSet, res: usize, count: usize) -> Result<BoundarySample, GeometryError> {
    let n = s.n();
    let h = s.h_fn()?;
    let grad = s.grad_fn()?;
    let spacing = s.bbox.spacing(res);

    // Values of h on the full vertex grid.
    let mut extents = vec![res + 1; n];
    let total: usize = extents.iter().product();
    use rayon::prelude::*;
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|lin| {
            let idx = decode(lin, &extents);
            h(&s.bbox.vertex(&idx, res))
        })
        .collect::<Result<_, _>>()?;

    // Seeds: linear interpolation on sign-changing edges.
    let mut seeds: Vec<Vec<f64>> = Vec::new();
    for axis in 0..n {
        let mut edge_extents = extents.clone();
        edge_extents[axis] = res;
        let edge_total: usize = edge_extents.iter().product();
        for lin in 0..edge_total {
            let mut idx = decode(lin, &edge_extents);
            let v0 = values[encode(&idx, &extents)];
            idx[axis] += 1;
            let v1 = values[encode(&idx, &extents)];
            idx[axis] -= 1;
            if v0 == 0.0 {
                seeds.push(s.bbox.vertex(&idx, res));
            } else if v0 * v1 < 0.0 {
                let t = v0 / (v0 - v1);
                let mut p = s.bbox.vertex(&idx, res);
                p[axis] += t * spacing[axis];
                seeds.push(p);
            }
        }
    }
    extents.truncate(n);

    if seeds.is_empty() {
        return Err(GeometryError::EmptyZeroSet);
    }

    // Project seeds onto the zero set.
    let mut warnings = Vec::new();
    let mut failed = 0usize;
    let total_seeds = seeds.len();
    let mut projected: Vec<Vec<f64>> = Vec::with_capacity(total_seeds);
    for seed in seeds {
        match newton_project(&seed, &h, &grad) {
            Some(p) => projected.push(p),
            None => {
                failed += 1;
                if warnings.len() < 8 {
                    warnings.push(format!(
                        "boundary projection did not converge from seed {seed:?}"
                    ));
                }
            }
        }
    }
    if failed * 10 > total_seeds {
        return Err(GeometryError::NewtonFailures {
            failed,
            total: total_seeds,
        });
    }

    // Deduplicate on a half-spacing grid, keeping first occurrences.
    let mut kept: Vec<Vec<f64>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for p in projected {
        let key: Vec<i64> = (0..n)
            .map(|a| ((p[a] - s.bbox.lower()[a]) / (spacing[a] / 2.0)).floor() as i64)
            .collect();
        if seen.insert(key) {
            kept.push(p);
        }
    }

    // Evenly subsample if we have more than requested.
    let points = if kept.len() > count {
        let stride = kept.len() as f64 / count as f64;
        (0..count)
            .map(|i| kept[(i as f64 * stride) as usize].clone())
            .collect()
    } else {
        kept
    };

    Ok(BoundarySample { points, warnings })
}

fn newton_project(
    seed: &[f64],
    h: &(impl Fn(&[f64]) -> Result<f64, DslError> + Send + Sync),
    grad: &(impl Fn(&[f64]) -> Result<Vec<f64>, DslError> + Send + Sync),
) -> Option<Vec<f64>> {
    let mut p = seed.to_vec();
    let mut hv = h(&p).ok()?;
    for _ in 0..60 {
        if hv.abs() <= TOL_BOUNDARY {
            return Some(p);
        }
        let g = grad(&p).ok()?;
        let g2: f64 = g.iter().map(|x| x * x).sum();
        if g2 < 1e-30 {
            return None;
        }
        // Damped Newton along the gradient: p <- p - lambda*h*g/||g||^2.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let cand: Vec<f64> = (0..p.len())
                .map(|i| p[i] - lambda * hv * g[i] / g2)
                .collect();
            if let Ok(hc) = h(&cand) {
                if hc.abs() < hv.abs() {
                    p = cand;
                    hv = hc;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    if hv.abs() <= TOL_BOUNDARY {
        Some(p)
    } else {
        None
    }
}

pub(crate) fn decode(mut lin: usize, extents: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize; extents.len()];
    for (a, &e) in extents.iter().enumerate() {
        idx[a] = lin % e;
        lin /= e;
    }
    idx
}

pub(crate) fn encode(idx: &[usize], extents: &[usize]) -> usize {
    let mut lin = 0usize;
    for a in (0..extents.len()).rev() {
        lin = lin * extents[a] + idx[a];
    }
    lin
}

/// Sign of dh_p·X_p at a boundary point, with the tolerance used.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryClassification {
    pub point: Vec<f64>,
    pub value: f64,
    pub label: BoundaryLabel,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryLabel {
    Inward,
    Tangent,
    Outward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySummary {
    AllInward,
    InwardOrTangent,
    SomeOutward,
}

impl std::fmt::Display for BoundarySummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BoundarySummary::AllInward => "AllInward",
            BoundarySummary::InwardOrTangent => "InwardOrTangent",
            BoundarySummary::SomeOutward => "SomeOutward",
        };
        f.write_str(s)
    }
}

/// Classifies X at each supplied boundary point as inward, tangent, or
/// outward by the sign of dh_p·X_p.
///
/// The tangency band is relative: tol = 1e-8·(1 + ‖X_p‖·‖grad h_p‖), so
/// rescaling X or h by positive constants cannot change labels.
pub fn classify_boundary(
    s: &SafeSet,
    field: &VectorField,
    points: &[Vec<f64>],
) -> Result<(Vec<BoundaryClassification>, BoundarySummary), GeometryError> {
    let mut out = Vec::with_capacity(points.len());
    let mut any_tangent = false;
    let mut any_outward = false;
    for p in points {
        let g = s.grad_at(p)?;
        let x = field.eval(p)?;
        let value: f64 = g.iter().zip(&x).map(|(a, b)| a * b).sum();
        let tolerance = 1e-8 * (1.0 + norm(&x) * norm(&g));
        let label = if value > tolerance {
            BoundaryLabel::Inward
        } else if value < -tolerance {
            BoundaryLabel::Outward
        } else {
            BoundaryLabel::Tangent
        };
        match label {
            BoundaryLabel::Tangent => any_tangent = true,
            BoundaryLabel::Outward => any_outward = true,
            BoundaryLabel::Inward => {}
        }
        out.push(BoundaryClassification {
            point: p.clone(),
            value,
            label,
            tolerance,
        });
    }
    let summary = if any_outward {
        BoundarySummary::SomeOutward
    } else if any_tangent {
        BoundarySummary::InwardOrTangent
    } else {
        BoundarySummary::AllInward
    };
    Ok((out, summary))
}

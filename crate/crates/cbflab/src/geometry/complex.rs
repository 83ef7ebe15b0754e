//! Cubical complexes over superlevel sets and their Euler characteristics.
//!
//! A top-dimensional grid cell is included iff h ≥ 0 at all 2ⁿ corners
//! (values exactly zero are nudged by +eta first); the complex is the
//! closure of the included top cells. Lower-dimensional cells are counted
//! by incidence: a k-face belongs to the complex iff one of its at most
//! 2^(n−k) adjacent top cells is included.

use rayon::prelude::*;
use std::collections::HashSet;

use super::{decode, encode, AxisBox, GeometryError, SafeSet, ETA};

/// The cubical complex underlying a safe set at a fixed resolution.
#[derive(Debug, Clone)]
pub struct CubicalComplex {
    n: usize,
    resolution: usize,
    bbox: AxisBox,
    counts: Vec<usize>,
    top_included: Vec<bool>,
}

/// Builds the complex at the set's own resolution and verifies that one
/// resolution doubling leaves χ unchanged; an unstable χ means the grid is
/// too coarse for the set's features.
///
/// Callers are expected to have run `regular_value_check` first: the corner
/// rule is only a faithful discretization when zero is a regular value.
pub fn build_cubical_complex(s: &SafeSet) -> Result<CubicalComplex, GeometryError> {
    let coarse = build_complex_at(s, s.resolution())?;
    let fine = build_complex_at(s, s.resolution() * 2)?;
    let (cc, fc) = (coarse.euler_characteristic(), fine.euler_characteristic());
    if cc != fc {
        return Err(GeometryError::ResolutionTooCoarse {
            coarse_res: s.resolution(),
            coarse_chi: cc,
            fine_res: s.resolution() * 2,
            fine_chi: fc,
        });
    }
    Ok(coarse)
}

/// Builds the complex at an explicit resolution, without the stability
/// check.
pub fn build_complex_at(s: &SafeSet, resolution: usize) -> Result<CubicalComplex, GeometryError> {
    let n = s.n();
    if n == 0 || n > 3 {
        return Err(GeometryError::UnsupportedDimension(n));
    }
    let res = resolution;
    let h = s.h_fn()?;
    let bbox = s.bbox().clone();

    // h at every grid vertex, then the positivity mask after the eta nudge.
    let vertex_extents = vec![res + 1; n];
    let vertex_total: usize = vertex_extents.iter().product();
    let positive: Vec<bool> = (0..vertex_total)
        .into_par_iter()
        .map(|lin| {
            let idx = decode(lin, &vertex_extents);
            let v = h(&bbox.vertex(&idx, res))?;
            let v = if v == 0.0 { ETA } else { v };
            Ok::<bool, crate::dsl::DslError>(v > 0.0)
        })
        .collect::<Result<_, _>>()?;

    // Corner rule for top cells.
    let cell_extents = vec![res; n];
    let cell_total: usize = cell_extents.iter().product();
    let top_included: Vec<bool> = (0..cell_total)
        .into_par_iter()
        .map(|lin| {
            let idx = decode(lin, &cell_extents);
            let mut corner = idx.clone();
            (0..1usize << n).all(|delta| {
                for a in 0..n {
                    corner[a] = idx[a] + ((delta >> a) & 1);
                }
                positive[encode(&corner, &vertex_extents)]
            })
        })
        .collect();

    let mut complex = CubicalComplex {
        n,
        resolution: res,
        bbox,
        counts: vec![0; n + 1],
        top_included,
    };
    complex.counts = complex.count_cells();
    Ok(complex)
}

impl CubicalComplex {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Cell counts c₀..c_n.
    pub fn cell_counts(&self) -> &[usize] {
        &self.counts
    }

    /// χ = Σ (−1)ᵏ cₖ.
    pub fn euler_characteristic(&self) -> i64 {
        euler_from_counts(&self.counts)
    }

    /// Number of included top cells.
    pub fn top_cell_count(&self) -> usize {
        self.counts[self.n]
    }

    /// Multi-indices of all included top cells, in linear (axis-0-fastest)
    /// order.
    pub fn top_cells(&self) -> Vec<Vec<usize>> {
        let extents = vec![self.resolution; self.n];
        self.top_included
            .iter()
            .enumerate()
            .filter(|(_, inc)| **inc)
            .map(|(lin, _)| decode(lin, &extents))
            .collect()
    }

    /// The axis-aligned box occupied by the top cell at `idx`.
    pub fn cell_box(&self, idx: &[usize]) -> AxisBox {
        let res = self.resolution as f64;
        let lo: Vec<f64> = (0..self.n)
            .map(|a| {
                let w = (self.bbox.upper()[a] - self.bbox.lower()[a]) / res;
                self.bbox.lower()[a] + idx[a] as f64 * w
            })
            .collect();
        let hi: Vec<f64> = (0..self.n)
            .map(|a| {
                let w = (self.bbox.upper()[a] - self.bbox.lower()[a]) / res;
                self.bbox.lower()[a] + (idx[a] + 1) as f64 * w
            })
            .collect();
        AxisBox::new(lo, hi).expect("cell bounds are ordered")
    }

    /// Whether the grid cell containing p is an included top cell.
    pub fn contains_cell_of(&self, p: &[f64]) -> bool {
        let res = self.resolution;
        let mut idx = Vec::with_capacity(self.n);
        for a in 0..self.n {
            let w = (self.bbox.upper()[a] - self.bbox.lower()[a]) / res as f64;
            let i = ((p[a] - self.bbox.lower()[a]) / w).floor();
            if i < 0.0 || i >= res as f64 {
                return false;
            }
            idx.push(i as usize);
        }
        self.top_included[encode(&idx, &vec![res; self.n])]
    }

    /// Counts every dimension by incidence against the included top cells.
    fn count_cells(&self) -> Vec<usize> {
        let n = self.n;
        let mut counts = vec![0usize; n + 1];
        for mask in 0..(1usize << n) {
            let k = (mask as u32).count_ones() as usize;
            counts[k] += self.count_for_mask(mask);
        }
        counts
    }

    fn count_for_mask(&self, mask: usize) -> usize {
        let n = self.n;
        let res = self.resolution;
        let extents: Vec<usize> = (0..n)
            .map(|a| if (mask >> a) & 1 == 1 { res } else { res + 1 })
            .collect();
        let total: usize = extents.iter().product();
        let free: Vec<usize> = (0..n).filter(|a| (mask >> a) & 1 == 0).collect();
        let top_extents = vec![res; n];
        (0..total)
            .into_par_iter()
            .filter(|&lin| {
                let idx = decode(lin, &extents);
                let mut j = idx.clone();
                'combo: for combo in 0..(1usize << free.len()) {
                    for (b, &d) in free.iter().enumerate() {
                        let shift = (combo >> b) & 1;
                        if idx[d] < shift {
                            continue 'combo;
                        }
                        let jd = idx[d] - shift;
                        if jd >= res {
                            continue 'combo;
                        }
                        j[d] = jd;
                    }
                    if self.top_included[encode(&j, &top_extents)] {
                        return true;
                    }
                }
                false
            })
            .count()
    }

    /// Cell counts of the boundary complex: the closure of all (n−1)-faces
    /// incident to exactly one included top cell. Returns counts for
    /// dimensions 0..n−1.
    pub fn boundary_cell_counts(&self) -> Vec<usize> {
        let n = self.n;
        let res = self.resolution;
        let top_extents = vec![res; n];

        // Collect boundary (n-1)-faces.
        let mut boundary_faces: Vec<(Vec<usize>, usize)> = Vec::new();
        for mask in 0..(1usize << n) {
            if (mask as u32).count_ones() as usize != n - 1 {
                continue;
            }
            let d = (0..n).find(|a| (mask >> a) & 1 == 0).unwrap();
            let extents: Vec<usize> = (0..n)
                .map(|a| if (mask >> a) & 1 == 1 { res } else { res + 1 })
                .collect();
            let total: usize = extents.iter().product();
            let faces: Vec<(Vec<usize>, usize)> = (0..total)
                .into_par_iter()
                .filter_map(|lin| {
                    let idx = decode(lin, &extents);
                    let mut incident = 0;
                    let mut j = idx.clone();
                    for shift in 0..2usize {
                        if idx[d] < shift {
                            continue;
                        }
                        let jd = idx[d] - shift;
                        if jd >= res {
                            continue;
                        }
                        j[d] = jd;
                        if self.top_included[encode(&j, &top_extents)] {
                            incident += 1;
                        }
                    }
                    (incident == 1).then_some((idx, mask))
                })
                .collect();
            boundary_faces.extend(faces);
        }

        // Closure of the boundary faces, deduplicated across faces.
        let mut cells: HashSet<(usize, Vec<usize>)> = HashSet::new();
        for (base, mask) in &boundary_faces {
            let mut sub = *mask;
            loop {
                let free = mask & !sub;
                let free_axes: Vec<usize> = (0..n).filter(|a| (free >> a) & 1 == 1).collect();
                for hi in 0..(1usize << free_axes.len()) {
                    let mut b = base.clone();
                    for (bit, &a) in free_axes.iter().enumerate() {
                        b[a] += (hi >> bit) & 1;
                    }
                    cells.insert((sub, b));
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & mask;
            }
        }

        let mut counts = vec![0usize; n];
        for (mask, _) in &cells {
            counts[(*mask as u32).count_ones() as usize] += 1;
        }
        counts
    }

    /// χ of the boundary complex.
    pub fn boundary_euler_characteristic(&self) -> i64 {
        euler_from_counts(&self.boundary_cell_counts())
    }

    /// CSV export of cell counts: `dimension,count` rows.
    pub fn counts_csv(&self) -> String {
        let mut out = String::from("dimension,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{k},{c}\n"));
        }
        out
    }
}

pub(crate) fn euler_from_counts(counts: &[usize]) -> i64 {
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let signed = c as i64;
            if k % 2 == 0 {
                signed
            } else {
                -signed
            }
        })
        .sum()
}

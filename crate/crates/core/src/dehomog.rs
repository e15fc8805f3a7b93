//! De-homogenization: turns the optimized specifications covered by each mesh
//! triangle into three per-side edge insets that keep the triangle's material
//! ratio, then patches notches at lattice vertices.

use std::f64::consts::PI;

use thiserror::Error;

use crate::domain::{orient, point_in_triangle, triangle_area, Domain, Vec2};
use crate::meshing::{line_deviation, FieldAlignedMesh};
use crate::optimizer::DesignField;
use crate::rank3::{layer_densities, volume_fraction};

#[derive(Debug, Error)]
pub enum DehomogError {
    #[error("triangle {0} has zero area")]
    DegenerateTriangle(usize),
    #[error("triangle {0} covers no sample even at the finest resampling")]
    EmptyTriangle(usize),
    #[error("triangle {0} has all-zero representative widths")]
    ZeroWidths(usize),
    #[error("design and mesh do not overlap")]
    NoOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DehomogParams {
    /// Minimum number of design samples per triangle.
    pub min_samples: usize,
    /// Triangles with a lower target ratio are left empty.
    pub drop_ratio: f64,
    pub fill_gaps: bool,
    /// Fill the strip between the mesh outline and the domain boundary with
    /// solid, so that boundary members follow the domain outline.
    pub boundary_skin: bool,
    /// Upper bound of the resampling factor.
    pub max_resample: usize,
}

impl Default for DehomogParams {
    fn default() -> Self {
        Self {
            min_samples: 10,
            drop_ratio: 0.02,
            fill_gaps: true,
            boundary_skin: true,
            max_resample: 64,
        }
    }
}

/// One resampled design point.
#[derive(Debug, Clone, Copy)]
pub struct DesignSample {
    pub position: Vec2,
    /// Area represented by the sample.
    pub weight: f64,
    pub density: f64,
    pub layer_densities: [f64; 3],
    /// Layer tangent angles.
    pub tangents: [f64; 3],
}

/// Design samples covered by one triangle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleBudget {
    /// Indices into the sample list.
    pub samples: Vec<usize>,
    pub count: usize,
    pub density_sum: f64,
    pub target_ratio: f64,
}

/// Resamples the design on a virtual grid `factor` times finer than its cells.
pub fn sample_design(design: &DesignField, factor: usize) -> Vec<Option<DesignSample>> {
    let (nx, ny) = (design.nx * factor, design.ny * factor);
    let f = factor as f64;
    let weight = 1.0 / (f * f);
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = ((i as f64 + 0.5) / f, (j as f64 + 0.5) / f);
            out.push(
                design
                    .interpolate(x, y)
                    .map(|(alpha, angles)| DesignSample {
                        position: Vec2::new(x, y),
                        weight,
                        density: volume_fraction(&alpha),
                        layer_densities: layer_densities(&alpha),
                        tangents: angles.map(|a| (a + PI / 2.0).rem_euclid(PI)),
                    }),
            );
        }
    }
    out
}

/// Assigns resampled design points to triangles, refining the resampling
/// until every triangle holds at least `min_samples` points.
pub fn bin_cells(
    design: &DesignField,
    mesh: &FieldAlignedMesh,
    params: &DehomogParams,
) -> Result<(Vec<DesignSample>, Vec<TriangleBudget>), DehomogError> {
    for (t, _) in mesh.triangles.iter().enumerate() {
        if triangle_area(&mesh.triangle(t)) <= 0.0 {
            return Err(DehomogError::DegenerateTriangle(t));
        }
    }
    let mut factor = 1;
    loop {
        let grid = sample_design(design, factor);
        let (gx, gy) = (design.nx * factor, design.ny * factor);
        let f = factor as f64;
        let mut owner: Vec<Option<usize>> = vec![None; gx * gy];
        let mut budgets = vec![TriangleBudget::default(); mesh.triangles.len()];
        for (t, budget) in budgets.iter_mut().enumerate() {
            let tri = mesh.triangle(t);
            let lo = tri
                .iter()
                .fold(Vec2::new(f64::INFINITY, f64::INFINITY), |a, p| a.inf(p));
            let hi = tri
                .iter()
                .fold(Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| {
                    a.sup(p)
                });
            let i0 = ((lo.x * f - 0.5).floor().max(0.0) as usize).min(gx);
            let i1 = ((hi.x * f - 0.5).ceil().max(0.0) as usize).min(gx - 1);
            let j0 = ((lo.y * f - 0.5).floor().max(0.0) as usize).min(gy);
            let j1 = ((hi.y * f - 0.5).ceil().max(0.0) as usize).min(gy - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let k = j * gx + i;
                    let Some(s) = &grid[k] else { continue };
                    if owner[k].is_none() && point_in_triangle(&s.position, &tri) {
                        owner[k] = Some(t);
                        budget.samples.push(k);
                    }
                }
            }
        }
        let short = budgets
            .iter()
            .position(|b| b.samples.len() < params.min_samples);
        if let Some(t) = short {
            if factor * 2 <= params.max_resample {
                factor *= 2;
                continue;
            }
            if budgets[t].samples.is_empty() {
                return Err(DehomogError::EmptyTriangle(t));
            }
        }

        // Compact sample list in grid order.
        let mut index = vec![usize::MAX; gx * gy];
        let mut samples = Vec::new();
        for (k, s) in grid.iter().enumerate() {
            if let Some(s) = s {
                index[k] = samples.len();
                samples.push(*s);
            }
        }
        if samples.is_empty() {
            return Err(DehomogError::NoOverlap);
        }
        for b in budgets.iter_mut() {
            for s in b.samples.iter_mut() {
                *s = index[*s];
            }
        }
        for b in budgets.iter_mut() {
            b.count = b.samples.len();
            b.density_sum = b.samples.iter().map(|&s| samples[s].density).sum();
            b.target_ratio = if b.count > 0 {
                b.density_sum / b.count as f64
            } else {
                0.0
            };
        }
        return Ok((samples, budgets));
    }
}

/// Per-layer deposition summed over the assigned samples, normalized by the
/// largest.
pub fn representative_widths(samples: &[DesignSample], members: &[usize]) -> Option<[f64; 3]> {
    let mut w = [0.0; 3];
    for &s in members {
        for n in 0..3 {
            w[n] += samples[s].layer_densities[n];
        }
    }
    let max = w.iter().cloned().fold(0.0, f64::max);
    (max > 0.0).then(|| w.map(|x| x / max))
}

/// Weighted average of line directions through doubled angles, in `[0, pi)`.
pub fn average_direction(angles: impl IntoIterator<Item = (f64, f64)>) -> Option<f64> {
    let (mut c, mut s, mut total) = (0.0, 0.0, 0.0);
    for (a, w) in angles {
        c += w * (2.0 * a).cos();
        s += w * (2.0 * a).sin();
        total += w;
    }
    if total <= 0.0 || c.hypot(s) <= 1e-12 * total {
        return None;
    }
    Some((0.5 * s.atan2(c)).rem_euclid(PI))
}

/// Representative tangent of each layer, weighted by layer density. Layers
/// without weight take `fallback[n]`.
pub fn representative_orientations(
    samples: &[DesignSample],
    members: &[usize],
    fallback: [f64; 3],
) -> [f64; 3] {
    let mut out = fallback;
    for (n, o) in out.iter_mut().enumerate() {
        if let Some(a) = average_direction(
            members
                .iter()
                .map(|&s| (samples[s].tangents[n], samples[s].layer_densities[n])),
        ) {
            *o = a;
        }
    }
    out
}

/// Direction of edge `k` of a triangle, as a line angle.
pub fn edge_direction(t: &[Vec2; 3], k: usize) -> f64 {
    let d = t[(k + 1) % 3] - t[k];
    d.y.atan2(d.x).rem_euclid(PI)
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Layer assigned to each edge, minimizing the total line deviation over all
/// bijections. Ties keep the lexicographically first assignment.
pub fn match_edges(t: &[Vec2; 3], tangents: &[f64; 3]) -> [usize; 3] {
    let dirs = [
        edge_direction(t, 0),
        edge_direction(t, 1),
        edge_direction(t, 2),
    ];
    let mut best = (f64::INFINITY, PERMUTATIONS[0]);
    for p in PERMUTATIONS {
        let cost: f64 = (0..3)
            .map(|k| line_deviation(dirs[k], tangents[p[k]]))
            .sum();
        if cost < best.0 - 1e-12 {
            best = (cost, p);
        }
    }
    best.1
}

/// Inward unit normal of edge `k` of a counter-clockwise triangle.
fn inward_normal(t: &[Vec2; 3], k: usize) -> Vec2 {
    let d = (t[(k + 1) % 3] - t[k]).normalize();
    Vec2::new(-d.y, d.x)
}

fn line_intersection(p: &Vec2, dp: &Vec2, q: &Vec2, dq: &Vec2) -> Option<Vec2> {
    let den = dp.x * dq.y - dp.y * dq.x;
    if den.abs() < 1e-300 {
        return None;
    }
    let w = q - p;
    let s = (w.x * dq.y - w.y * dq.x) / den;
    Some(p + dp * s)
}

/// Corners of the region left by offsetting each edge inward by `insets`.
/// Corner `k` sits near vertex `k`. `None` when the region is empty.
pub fn void_triangle(t: &[Vec2; 3], insets: &[f64; 3]) -> Option<[Vec2; 3]> {
    let mut c = [Vec2::zeros(); 3];
    for (k, ck) in c.iter_mut().enumerate() {
        let prev = (k + 2) % 3;
        let (na, nb) = (inward_normal(t, prev), inward_normal(t, k));
        let pa = t[prev] + na * insets[prev];
        let pb = t[k] + nb * insets[k];
        let da = t[k] - t[prev];
        let db = t[(k + 1) % 3] - t[k];
        *ck = line_intersection(&pa, &da, &pb, &db)?;
    }
    // Past the solid limit the lines meet again in a point-reflected triangle;
    // a real void keeps every corner inside the opposite offset line.
    let inside = (0..3).all(|k| {
        let o = (k + 1) % 3;
        let n = inward_normal(t, o);
        n.dot(&c[k]) > n.dot(&t[o]) + insets[o]
    });
    (inside && orient(&c[0], &c[1], &c[2]) > 0.0).then_some(c)
}

fn void_area(t: &[Vec2; 3], insets: &[f64; 3]) -> f64 {
    void_triangle(t, insets).map_or(0.0, |c| triangle_area(&c))
}

/// Clips a convex polygon by the three inset half-planes, for cross-checks.
pub fn void_polygon_by_clipping(t: &[Vec2; 3], insets: &[f64; 3]) -> Vec<Vec2> {
    let mut poly = t.to_vec();
    for k in 0..3 {
        let n = inward_normal(t, k);
        poly = crate::domain::clip_half_plane(&poly, &n, n.dot(&t[k]) + insets[k]);
        if poly.is_empty() {
            break;
        }
    }
    poly
}

/// Thickness scale and per-edge insets of one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThicknessSolution {
    pub t: f64,
    pub insets: [f64; 3],
    pub void: Option<[Vec2; 3]>,
}

/// Solves `(A - A_void(t)) / A = ratio` with insets `t * widths` by bisection.
pub fn solve_thickness(tri: &[Vec2; 3], widths: &[f64; 3], ratio: f64) -> ThicknessSolution {
    let area = triangle_area(tri);
    let insets = |t: f64| widths.map(|w| t * w);
    let solid_ratio = |t: f64| 1.0 - void_area(tri, &insets(t)) / area;
    if ratio <= 0.0 {
        return ThicknessSolution {
            t: 0.0,
            insets: [0.0; 3],
            void: Some(*tri),
        };
    }
    // Smallest thickness that fills the triangle.
    let mut hi = tri
        .iter()
        .enumerate()
        .map(|(k, p)| (p - tri[(k + 1) % 3]).norm())
        .fold(0.0, f64::max);
    while solid_ratio(hi) < 1.0 && hi < 1e12 {
        hi *= 2.0;
    }
    let target = if ratio >= 1.0 - 1e-9 { 1.0 } else { ratio };
    let mut lo = 0.0;
    while hi - lo > 1e-15 * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if solid_ratio(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = if target >= 1.0 { hi } else { 0.5 * (lo + hi) };
    let d = insets(t);
    ThicknessSolution {
        t,
        insets: d,
        void: if target >= 1.0 {
            None
        } else {
            void_triangle(tri, &d)
        },
    }
}

/// De-homogenized state of one kept triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeTriangle {
    /// Ratio requested by the covered design.
    pub target_ratio: f64,
    /// Ratio the insets were solved for, after gap compensation.
    pub solved_ratio: f64,
    pub widths: [f64; 3],
    pub tangents: [f64; 3],
    /// Layer followed by each triangle edge.
    pub edge_layers: [usize; 3],
    pub t: f64,
    /// Inset of each triangle edge.
    pub insets: [f64; 3],
    pub void: Option<[Vec2; 3]>,
}

/// Lattice geometry on a field-aligned mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeDesign {
    pub mesh: FieldAlignedMesh,
    /// `None` for dropped triangles.
    pub triangles: Vec<Option<LatticeTriangle>>,
    /// Solid gap patches.
    pub patches: Vec<[Vec2; 3]>,
    /// Whether grid cells outside every mesh triangle are solid.
    pub boundary_skin: bool,
    /// Area of the boundary skin on the grid the lattice was built for.
    pub skin_area: f64,
    /// Solid area over domain area.
    pub volume_fraction: f64,
    pub domain_area: f64,
}

impl LatticeDesign {
    /// Insets on the left and right side of each mesh edge, seen from `v[0]`.
    pub fn edge_insets(&self) -> Vec<[f64; 2]> {
        let mut out = vec![[0.0; 2]; self.mesh.edges.len()];
        for (t, lt) in self.triangles.iter().enumerate() {
            let Some(lt) = lt else { continue };
            let tri = self.mesh.triangles[t];
            for k in 0..3 {
                let e = self.mesh.triangle_edges[t][k];
                let side = if self.mesh.edges[e].v[0] == tri[k] {
                    0
                } else {
                    1
                };
                out[e][side] = lt.insets[k];
            }
        }
        out
    }

    /// Area of triangle material and patches, without the skin.
    pub fn solid_area(&self) -> f64 {
        let mut a = 0.0;
        for (t, lt) in self.triangles.iter().enumerate() {
            if let Some(lt) = lt {
                a += triangle_area(&self.mesh.triangle(t))
                    - lt.void.map_or(0.0, |v| triangle_area(&v));
            }
        }
        a + self.patches.iter().map(triangle_area).sum::<f64>()
    }

    /// Whether `p` lies in solid material.
    pub fn is_solid(&self, t: usize, p: &Vec2) -> bool {
        let Some(lt) = &self.triangles[t] else {
            return false;
        };
        let tri = self.mesh.triangle(t);
        point_in_triangle(p, &tri) && !lt.void.is_some_and(|v| strictly_inside(p, &v))
    }

    /// Solid fraction of triangle `t` measured on `n * n` points of the R2
    /// low-discrepancy sequence folded into the triangle, optionally counting
    /// gap patches. The points form no rows parallel to the edges, so strips
    /// along the edges are not quantized row by row.
    pub fn raster_ratio(&self, t: usize, n: usize, with_patches: bool) -> f64 {
        // Inverse powers of the plastic number.
        const A1: f64 = 0.754_877_666_246_692_8;
        const A2: f64 = 0.569_840_290_998_053_3;
        let tri = self.mesh.triangle(t);
        let (e1, e2) = (tri[1] - tri[0], tri[2] - tri[0]);
        let patches: Vec<&[Vec2; 3]> = if with_patches {
            self.patches
                .iter()
                .filter(|p| p.iter().any(|q| point_in_triangle(q, &tri)))
                .collect()
        } else {
            Vec::new()
        };
        let total = n * n;
        let mut solid = 0usize;
        for k in 0..total {
            let (mut u, mut v) = ((0.5 + A1 * k as f64).fract(), (0.5 + A2 * k as f64).fract());
            if u + v > 1.0 {
                (u, v) = (1.0 - u, 1.0 - v);
            }
            let p = tri[0] + e1 * u + e2 * v;
            if self.is_solid(t, &p) || patches.iter().any(|q| point_in_triangle(&p, q)) {
                solid += 1;
            }
        }
        solid as f64 / total.max(1) as f64
    }
}

/// Cells of an `nx` by `ny` grid with spacing `cell` whose centers lie in
/// some mesh triangle.
pub fn covered_cells(mesh: &FieldAlignedMesh, nx: usize, ny: usize, cell: f64) -> Vec<bool> {
    let mut covered = vec![false; nx * ny];
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle(t);
        let lo = tri
            .iter()
            .fold(Vec2::new(f64::INFINITY, f64::INFINITY), |a, p| a.inf(p));
        let hi = tri
            .iter()
            .fold(Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| {
                a.sup(p)
            });
        let i0 = (lo.x / cell - 0.5).floor().max(0.0) as usize;
        let j0 = (lo.y / cell - 0.5).floor().max(0.0) as usize;
        let i1 = ((hi.x / cell - 0.5).ceil().max(0.0) as usize).min(nx.saturating_sub(1));
        let j1 = ((hi.y / cell - 0.5).ceil().max(0.0) as usize).min(ny.saturating_sub(1));
        for j in j0..=j1 {
            for i in i0..=i1 {
                let p = Vec2::new((i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell);
                if !covered[j * nx + i] && point_in_triangle(&p, &tri) {
                    covered[j * nx + i] = true;
                }
            }
        }
    }
    covered
}

fn strictly_inside(p: &Vec2, t: &[Vec2; 3]) -> bool {
    orient(&t[0], &t[1], p) > 0.0 && orient(&t[1], &t[2], p) > 0.0 && orient(&t[2], &t[0], p) > 0.0
}

/// Gap patches at lattice vertices where a triangle's void reaches closer to
/// the vertex than the chord between its two neighbours' void corners.
pub fn gap_patches(
    mesh: &FieldAlignedMesh,
    triangles: &[Option<LatticeTriangle>],
) -> Vec<[Vec2; 3]> {
    let neighbour = |t: usize, k: usize| -> Option<usize> {
        let e = &mesh.edges[mesh.triangle_edges[t][k]];
        e.triangles.into_iter().flatten().find(|&o| o != t)
    };
    let corner_at = |t: usize, v: usize| -> Option<Vec2> {
        let lt = triangles[t].as_ref()?;
        let k = mesh.triangles[t].iter().position(|&x| x == v)?;
        lt.void.map(|c| c[k])
    };
    let mut patches = Vec::new();
    for (t, lt) in triangles.iter().enumerate() {
        let Some(lt) = lt else { continue };
        let Some(own) = lt.void else { continue };
        for k in 0..3 {
            let v = mesh.triangles[t][k];
            let (Some(ta), Some(tb)) = (neighbour(t, k), neighbour(t, (k + 2) % 3)) else {
                continue;
            };
            let (Some(p2), Some(p3)) = (corner_at(ta, v), corner_at(tb, v)) else {
                continue;
            };
            let p1 = own[k];
            let pv = mesh.vertices[v];
            let s = if orient(&pv, &p2, &p3) > 0.0 {
                [pv, p2, p3]
            } else {
                [pv, p3, p2]
            };
            if !strictly_inside(&p1, &s) {
                continue;
            }
            let chord = p3 - p2;
            let along = |to: Vec2| -> Option<Vec2> {
                let d = to - p1;
                let q = line_intersection(&p1, &d, &p2, &chord)?;
                let s = (q - p1).dot(&d) / d.norm_squared();
                (0.0..=1.0).contains(&s).then_some(q)
            };
            let (Some(a), Some(b)) = (along(own[(k + 1) % 3]), along(own[(k + 2) % 3])) else {
                continue;
            };
            let patch = if orient(&p1, &a, &b) > 0.0 {
                [p1, a, b]
            } else {
                [p1, b, a]
            };
            if triangle_area(&patch) > 0.0 {
                patches.push(patch);
            }
        }
    }
    patches
}

fn solve_all(mesh: &FieldAlignedMesh, triangles: &mut [Option<LatticeTriangle>], scale: f64) {
    for (t, lt) in triangles.iter_mut().enumerate() {
        if let Some(lt) = lt {
            let tri = mesh.triangle(t);
            lt.solved_ratio = (lt.target_ratio * scale).min(1.0);
            // Insets follow the matched edge layers.
            let w = lt.edge_layers.map(|n| lt.widths[n]);
            let sol = solve_thickness(&tri, &w, lt.solved_ratio);
            lt.t = sol.t;
            lt.insets = sol.insets;
            lt.void = sol.void;
        }
    }
}

/// Full de-homogenization of a design on a mesh over `domain`.
///
/// The gap patches and the boundary skin are paid for by one uniform scaling
/// of all triangle ratios, chosen so that the total solid area matches the
/// mean design density.
pub fn dehomogenize(
    design: &DesignField,
    mesh: &FieldAlignedMesh,
    domain: &Domain,
    params: &DehomogParams,
) -> Result<LatticeDesign, DehomogError> {
    let (samples, budgets) = bin_cells(design, mesh, params)?;
    let mut triangles = Vec::with_capacity(budgets.len());
    for (t, b) in budgets.iter().enumerate() {
        if b.target_ratio < params.drop_ratio {
            triangles.push(None);
            continue;
        }
        let tri = mesh.triangle(t);
        let widths =
            representative_widths(&samples, &b.samples).ok_or(DehomogError::ZeroWidths(t))?;
        // Layers without material fall back to the edge of that class.
        let fallback = std::array::from_fn(|n| {
            let k = (0..3)
                .find(|&k| mesh.edges[mesh.triangle_edges[t][k]].class as usize == n)
                .unwrap_or(n);
            edge_direction(&tri, k)
        });
        let tangents = representative_orientations(&samples, &b.samples, fallback);
        let edge_layers = match_edges(&tri, &tangents);
        triangles.push(Some(LatticeTriangle {
            target_ratio: b.target_ratio,
            solved_ratio: b.target_ratio,
            widths,
            tangents,
            edge_layers,
            t: 0.0,
            insets: [0.0; 3],
            void: None,
        }));
    }

    let domain_area = domain.area();
    let skin_area = if params.boundary_skin {
        let covered = covered_cells(mesh, domain.nx, domain.ny, domain.cell);
        let n = covered
            .iter()
            .zip(&domain.active)
            .filter(|&(&c, &a)| a && !c)
            .count();
        n as f64 * domain.cell * domain.cell
    } else {
        0.0
    };
    let material: f64 = triangles
        .iter()
        .enumerate()
        .filter_map(|(t, lt)| {
            lt.as_ref()
                .map(|lt| triangle_area(&mesh.triangle(t)) * lt.target_ratio)
        })
        .sum();
    let budget = design.mean_density() * domain_area;
    let scale = |extra: f64| {
        if material > 0.0 {
            ((budget - extra) / material).max(0.0)
        } else {
            1.0
        }
    };
    let compensate = params.fill_gaps || params.boundary_skin;
    solve_all(
        mesh,
        &mut triangles,
        if compensate { scale(skin_area) } else { 1.0 },
    );
    let mut patches = Vec::new();
    if params.fill_gaps {
        patches = gap_patches(mesh, &triangles);
        let patch_area: f64 = patches.iter().map(triangle_area).sum();
        solve_all(mesh, &mut triangles, scale(skin_area + patch_area));
        patches = gap_patches(mesh, &triangles);
    }
    let mut lattice = LatticeDesign {
        mesh: mesh.clone(),
        triangles,
        patches,
        boundary_skin: params.boundary_skin,
        skin_area,
        volume_fraction: 0.0,
        domain_area,
    };
    lattice.volume_fraction = (lattice.solid_area() + skin_area) / domain_area;
    Ok(lattice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn equilateral(l: f64) -> [Vec2; 3] {
        [
            Vec2::new(0.0, 0.0),
            Vec2::new(l, 0.0),
            Vec2::new(0.5 * l, 0.5 * l * 3f64.sqrt()),
        ]
    }

    #[test]
    fn widths_follow_layer_densities() {
        let s = DesignSample {
            position: Vec2::zeros(),
            weight: 1.0,
            density: volume_fraction(&[0.5; 3]),
            layer_densities: layer_densities(&[0.5; 3]),
            tangents: [0.0; 3],
        };
        assert_eq!(s.layer_densities, [0.125, 0.25, 0.5]);
        let w = representative_widths(&[s, s], &[0, 1]).unwrap();
        assert_eq!(w, [0.25, 0.5, 1.0]);
        let mut single = s;
        single.layer_densities = layer_densities(&[0.4, 0.0, 0.0]);
        assert_eq!(
            representative_widths(&[single], &[0]).unwrap(),
            [1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn doubled_angle_average() {
        let t = 0.4;
        assert_relative_eq!(
            average_direction([(t, 1.0), (t + PI, 1.0)]).unwrap(),
            t,
            epsilon = 1e-12
        );
        let d = 10f64.to_radians();
        assert_relative_eq!(
            average_direction([(t - d, 1.0), (t + d, 1.0)]).unwrap(),
            t,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            average_direction([(0.05, 1.0), (PI - 0.05, 1.0)])
                .unwrap()
                .sin(),
            0.0,
            epsilon = 1e-12
        );
        assert!(average_direction([(0.3, 0.0)]).is_none());
    }

    #[test]
    fn edge_matching() {
        let tri = equilateral(1.0);
        let dirs = [0.0, 2.0 * PI / 3.0, PI / 3.0];
        assert_eq!(match_edges(&tri, &dirs), [0, 1, 2]);
        let rotated = dirs.map(|d| d + 5f64.to_radians());
        assert_eq!(match_edges(&tri, &rotated), [0, 1, 2]);
        let swapped = [PI / 3.0, 0.0, 2.0 * PI / 3.0];
        assert_eq!(match_edges(&tri, &swapped), [1, 2, 0]);
        // All tangents identical: every bijection ties, the first wins.
        assert_eq!(match_edges(&tri, &[0.3; 3]), [0, 1, 2]);
    }

    #[test]
    fn thickness_closed_form_and_limits() {
        let l = 2.0;
        let tri = equilateral(l);
        let r = l / (2.0 * 3f64.sqrt());
        for rho in [0.1, 0.5, 0.9] {
            let sol = solve_thickness(&tri, &[1.0; 3], rho);
            let s = (1.0 - rho).sqrt();
            assert_relative_eq!(
                sol.insets.iter().sum::<f64>(),
                3.0 * r * (1.0 - s),
                epsilon = 1e-12
            );
        }
        let zero = solve_thickness(&tri, &[1.0, 0.5, 0.2], 0.0);
        assert_eq!(zero.t, 0.0);
        assert_relative_eq!(triangle_area(&zero.void.unwrap()), triangle_area(&tri));
        let full = solve_thickness(&tri, &[1.0, 0.5, 0.2], 1.0);
        assert!(full.void.is_none());
        let sol = solve_thickness(&tri, &[1.0, 0.5, 0.2], 0.4);
        assert!(sol.insets[0] > sol.insets[1] && sol.insets[1] > sol.insets[2]);
        let clipped = void_polygon_by_clipping(&tri, &sol.insets);
        assert_relative_eq!(
            crate::domain::polygon_area(&clipped),
            triangle_area(&sol.void.unwrap()),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            1.0 - triangle_area(&sol.void.unwrap()) / triangle_area(&tri),
            0.4,
            epsilon = 1e-9
        );
    }

    fn regular_mesh(n: usize) -> FieldAlignedMesh {
        let mut v = Vec::new();
        let h = 3f64.sqrt() / 2.0;
        for j in 0..=n {
            for i in 0..=n {
                v.push(Vec2::new(i as f64 + 0.5 * j as f64, h * j as f64));
            }
        }
        let id = |i: usize, j: usize| j * (n + 1) + i;
        let mut t = Vec::new();
        for j in 0..n {
            for i in 0..n {
                t.push([id(i, j), id(i + 1, j), id(i, j + 1)]);
                t.push([id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        FieldAlignedMesh::from_triangles(1.0, v, t, |a, b| {
            let d = b - a;
            ((d.y.atan2(d.x).rem_euclid(PI) / (PI / 3.0)).round() as u8) % 3
        })
    }

    fn uniform_lattice(
        mesh: &FieldAlignedMesh,
        ratio: f64,
        bump: Option<(usize, f64)>,
    ) -> Vec<Option<LatticeTriangle>> {
        let mut tris: Vec<Option<LatticeTriangle>> = (0..mesh.triangles.len())
            .map(|_| {
                Some(LatticeTriangle {
                    target_ratio: ratio,
                    solved_ratio: ratio,
                    widths: [1.0; 3],
                    tangents: [0.0; 3],
                    edge_layers: [0, 1, 2],
                    t: 0.0,
                    insets: [0.0; 3],
                    void: None,
                })
            })
            .collect();
        if let Some((t, r)) = bump {
            tris[t].as_mut().unwrap().target_ratio = r;
        }
        solve_all(mesh, &mut tris, 1.0);
        tris
    }

    #[test]
    fn uniform_lattice_has_no_patches() {
        let mesh = regular_mesh(4);
        let tris = uniform_lattice(&mesh, 0.4, None);
        assert!(gap_patches(&mesh, &tris).is_empty());
    }

    #[test]
    fn thin_triangle_between_thick_ones_gets_patched() {
        let mesh = regular_mesh(4);
        let mut tris = uniform_lattice(&mesh, 0.8, None);
        // One thin interior triangle.
        let thin = 9;
        tris[thin].as_mut().unwrap().target_ratio = 0.1;
        solve_all(&mesh, &mut tris, 1.0);
        let patches = gap_patches(&mesh, &tris);
        assert!(!patches.is_empty());
        let tri = mesh.triangle(thin);
        for p in &patches {
            assert!(p.iter().all(|q| point_in_triangle(q, &tri)));
            let c = (p[0] + p[1] + p[2]) / 3.0;
            assert!(!tris[thin]
                .as_ref()
                .unwrap()
                .void
                .is_some_and(|v| !strictly_inside(&c, &v)));
        }
    }

    #[test]
    fn uniform_design_gives_uniform_ratios() {
        let (nx, ny) = (12, 10);
        let mut design =
            DesignField::equilateral(nx, ny, vec![true; nx * ny], 0.3, &vec![0.2; nx * ny]);
        design.alpha = vec![[0.3, 0.2, 0.25]; nx * ny];
        let mesh = {
            let v = vec![
                Vec2::new(0.0, 0.0),
                Vec2::new(12.0, 0.0),
                Vec2::new(12.0, 10.0),
                Vec2::new(0.0, 10.0),
            ];
            FieldAlignedMesh::from_triangles(5.0, v, vec![[0, 1, 2], [0, 2, 3]], |_, _| 0)
        };
        let rho = volume_fraction(&[0.3, 0.2, 0.25]);
        let (_, budgets) = bin_cells(&design, &mesh, &DehomogParams::default()).unwrap();
        for b in budgets {
            assert!(b.count >= 10);
            assert_relative_eq!(b.target_ratio, rho, epsilon = 1e-12);
        }
        let domain = Domain::new(nx, ny, 1.0, vec![true; nx * ny]);
        let lattice = dehomogenize(&design, &mesh, &domain, &DehomogParams::default()).unwrap();
        assert_eq!(lattice.skin_area, 0.0);
        assert_relative_eq!(lattice.volume_fraction, rho, epsilon = 1e-6);
        for t in 0..2 {
            assert!((lattice.raster_ratio(t, 60, true) - rho).abs() < 0.02);
        }
    }

    #[test]
    fn small_triangles_trigger_resampling() {
        let (nx, ny) = (4, 4);
        let design = DesignField::equilateral(nx, ny, vec![true; 16], 0.3, &[0.0; 16]);
        let v = vec![
            Vec2::new(1.0, 1.0),
            Vec2::new(2.0, 1.0),
            Vec2::new(1.0, 2.0),
        ];
        let mesh = FieldAlignedMesh::from_triangles(1.0, v, vec![[0, 1, 2]], |_, _| 0);
        let (samples, budgets) = bin_cells(&design, &mesh, &DehomogParams::default()).unwrap();
        assert!(budgets[0].count >= 10);
        assert!(samples[0].weight < 1.0);
    }
}

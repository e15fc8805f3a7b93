//! Field-aligned triangulation of the optimized orientation field.
//!
//! Three stages: reduce the layer orientations to a 6-fold symmetric
//! direction field, optimize a lattice-snapped position field over jittered
//! samples, then extract vertices, edges and faces from the snapped positions.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{orient, segments_cross, Domain, Vec2};
use crate::optimizer::DesignField;

const SIXTH: f64 = PI / 3.0;
const TRUST_REGION: f64 = PI / 12.0;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("the domain contains no sample")]
    EmptyDomain,
    #[error("invalid meshing parameters: {0}")]
    InvalidParameters(String),
    #[error("mesh extraction produced no triangle")]
    NoTriangles,
    #[error("non-manifold mesh after cleanup: {0}")]
    NonManifold(String),
}

/// Representative of `a` in `[0, pi/3)`.
pub fn reduce_rosy(a: f64) -> f64 {
    let r = a.rem_euclid(SIXTH);
    if r >= SIXTH {
        0.0
    } else {
        r
    }
}

/// Difference `a - b` reduced to `[-pi/6, pi/6)` under 6-fold symmetry.
pub fn rosy_signed(a: f64, b: f64) -> f64 {
    (a - b + SIXTH / 2.0).rem_euclid(SIXTH) - SIXTH / 2.0
}

/// Angular distance under 6-fold symmetry, in `[0, pi/6]`.
pub fn rosy_deviation(a: f64, b: f64) -> f64 {
    rosy_signed(a, b).abs()
}

/// Angular distance between undirected lines, in `[0, pi/2]`.
pub fn line_deviation(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// 6-fold symmetric direction field on the simulation grid.
#[derive(Debug, Clone)]
pub struct RoSyField {
    pub nx: usize,
    pub ny: usize,
    pub active: Vec<bool>,
    /// Representative direction in `[0, pi/3)`.
    pub rep: Vec<f64>,
    /// Layer-3 tangent in `[0, pi)`, consistent with `rep`.
    pub tangent3: Vec<f64>,
    /// Nearest active cell of every cell.
    nearest: Vec<usize>,
}

impl RoSyField {
    pub fn cell_at(&self, p: &Vec2) -> usize {
        let i = (p.x.floor().max(0.0) as usize).min(self.nx - 1);
        let j = (p.y.floor().max(0.0) as usize).min(self.ny - 1);
        self.nearest[j * self.nx + i]
    }

    pub fn rep_at(&self, p: &Vec2) -> f64 {
        self.rep[self.cell_at(p)]
    }

    /// Tangent angles of the three layers at `p`, indexed by layer.
    pub fn tangents_at(&self, p: &Vec2) -> [f64; 3] {
        let t3 = self.tangent3[self.cell_at(p)];
        [
            (t3 + 2.0 * SIXTH).rem_euclid(PI),
            (t3 + SIXTH).rem_euclid(PI),
            t3,
        ]
    }

    /// Sum of 6-fold deviations over ordered pairs of adjacent active cells.
    pub fn energy(&self) -> f64 {
        let mut e = 0.0;
        for c in 0..self.rep.len() {
            for n in grid_neighbors(self.nx, self.ny, c) {
                if self.active[c] && self.active[n] {
                    e += rosy_deviation(self.rep[c], self.rep[n]);
                }
            }
        }
        e
    }
}

fn grid_neighbors(nx: usize, ny: usize, c: usize) -> impl Iterator<Item = usize> {
    let (i, j) = (c % nx, c / nx);
    let mut out = [usize::MAX; 4];
    if i > 0 {
        out[0] = c - 1;
    }
    if i + 1 < nx {
        out[1] = c + 1;
    }
    if j > 0 {
        out[2] = c - nx;
    }
    if j + 1 < ny {
        out[3] = c + nx;
    }
    out.into_iter().filter(|&n| n != usize::MAX)
}

fn nearest_active(nx: usize, ny: usize, active: &[bool]) -> Vec<usize> {
    let mut nearest = vec![usize::MAX; nx * ny];
    let mut queue = VecDeque::new();
    for c in 0..nx * ny {
        if active[c] {
            nearest[c] = c;
            queue.push_back(c);
        }
    }
    while let Some(c) = queue.pop_front() {
        for n in grid_neighbors(nx, ny, c) {
            if nearest[n] == usize::MAX {
                nearest[n] = nearest[c];
                queue.push_back(n);
            }
        }
    }
    nearest
}

/// Reduces the base-layer tangents to representatives and optionally smooths
/// them. Smoothing moves no cell by more than pi/12 from its input and never
/// increases the local deviation.
pub fn build_rosy(design: &DesignField, smoothing_iters: usize) -> RoSyField {
    let (nx, ny) = (design.nx, design.ny);
    let tangent_in: Vec<f64> = (0..nx * ny).map(|c| design.theta3(c) + PI / 2.0).collect();
    let original: Vec<f64> = tangent_in.iter().map(|&t| reduce_rosy(t)).collect();
    let mut rep = original.clone();
    for _ in 0..smoothing_iters {
        for c in 0..nx * ny {
            if !design.active[c] {
                continue;
            }
            let nbrs: Vec<usize> = grid_neighbors(nx, ny, c)
                .filter(|&n| design.active[n])
                .collect();
            if nbrs.is_empty() {
                continue;
            }
            let (s, co) = nbrs.iter().fold((0.0, 0.0), |(s, co), &n| {
                (s + (6.0 * rep[n]).sin(), co + (6.0 * rep[n]).cos())
            });
            if s.hypot(co) < 1e-12 {
                continue;
            }
            let target = s.atan2(co) / 6.0;
            let step = rosy_signed(target, original[c]).clamp(-TRUST_REGION, TRUST_REGION);
            let candidate = reduce_rosy(original[c] + step);
            let local = |v: f64| nbrs.iter().map(|&n| rosy_deviation(v, rep[n])).sum::<f64>();
            if local(candidate) < local(rep[c]) {
                rep[c] = candidate;
            }
        }
    }
    let tangent3 = rep
        .iter()
        .zip(&tangent_in)
        .map(|(&r, &t)| {
            let k = (0..3)
                .min_by(|&a, &b| {
                    line_deviation(r + a as f64 * SIXTH, t)
                        .total_cmp(&line_deviation(r + b as f64 * SIXTH, t))
                })
                .unwrap_or(0);
            (r + k as f64 * SIXTH).rem_euclid(PI)
        })
        .collect();
    RoSyField {
        nx,
        ny,
        active: design.active.clone(),
        rep,
        tangent3,
        nearest: nearest_active(nx, ny, &design.active),
    }
}

/// Target edge length of an equilateral tiling of `area` with `count` triangles.
pub fn edge_length_for_count(area: f64, count: usize) -> f64 {
    (4.0 * area / (3f64.sqrt() * count as f64)).sqrt()
}

fn lattice_basis(phi: f64, h: f64) -> (Vec2, Vec2) {
    (
        Vec2::new(phi.cos(), phi.sin()) * h,
        Vec2::new((phi + SIXTH).cos(), (phi + SIXTH).sin()) * h,
    )
}

/// Lattice vector of the triangular lattice `(phi, h)` nearest to `d`.
pub fn nearest_lattice_vector(d: &Vec2, phi: f64, h: f64) -> Vec2 {
    let (e1, e2) = lattice_basis(phi, h);
    let det = e1.x * e2.y - e1.y * e2.x;
    let a = (d.x * e2.y - d.y * e2.x) / det;
    let b = (e1.x * d.y - e1.y * d.x) / det;
    let (fa, fb) = (a.floor(), b.floor());
    let mut best = Vec2::zeros();
    let mut best_d = f64::INFINITY;
    for (da, db) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let v = e1 * (fa + da) + e2 * (fb + db);
        let dist = (d - v).norm_squared();
        if dist < best_d {
            best_d = dist;
            best = v;
        }
    }
    best
}

/// Meshing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshParams {
    pub edge_length: f64,
    pub smoothing_iters: usize,
    pub position_iters: usize,
    pub seed: u64,
    /// Collapse and connection tolerance as a fraction of the edge length.
    pub tolerance: f64,
    /// Vertices closer to the boundary than this fraction of the edge length
    /// are projected onto it.
    pub boundary_snap: f64,
    /// Sample spacing as a fraction of the edge length.
    pub sample_spacing: f64,
}

impl MeshParams {
    pub fn new(edge_length: f64) -> Self {
        Self {
            edge_length,
            smoothing_iters: 0,
            position_iters: 30,
            seed: 0,
            tolerance: 0.3,
            boundary_snap: 0.5,
            sample_spacing: 0.5,
        }
    }

    pub fn for_count(domain: &Domain, count: usize) -> Self {
        Self::new(edge_length_for_count(domain.area(), count))
    }

    fn validate(&self) -> Result<(), MeshError> {
        let bad = |m: String| Err(MeshError::InvalidParameters(m));
        if !(self.edge_length > 0.0 && self.edge_length.is_finite()) {
            return bad(format!("edge length {} must be positive", self.edge_length));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 0.5) {
            return bad(format!("tolerance {} must lie in (0, 0.5)", self.tolerance));
        }
        if !(self.sample_spacing > 0.0 && self.sample_spacing <= 1.0) {
            return bad(format!(
                "sample spacing {} must lie in (0, 1]",
                self.sample_spacing
            ));
        }
        if !(self.boundary_snap >= 0.0) {
            return bad(format!(
                "boundary snap {} must be non-negative",
                self.boundary_snap
            ));
        }
        Ok(())
    }
}

/// Jittered samples with their snapped lattice positions.
#[derive(Debug, Clone)]
pub struct PositionField {
    pub h: f64,
    pub spacing: f64,
    /// Sample locations.
    pub samples: Vec<Vec2>,
    /// Snapped lattice position of each sample.
    pub lattice: Vec<Vec2>,
    /// Local representative direction of each sample.
    pub reps: Vec<f64>,
    gx: usize,
    gy: usize,
    grid: Vec<Option<usize>>,
    grid_index: Vec<(usize, usize)>,
}

impl PositionField {
    /// Samples whose grid slots lie within `reach` slots of sample `i`.
    fn nearby(&self, i: usize, reach: usize) -> impl Iterator<Item = usize> + '_ {
        let (a, b) = self.grid_index[i];
        let (a0, a1) = (a.saturating_sub(reach), (a + reach).min(self.gx - 1));
        let (b0, b1) = (b.saturating_sub(reach), (b + reach).min(self.gy - 1));
        (b0..=b1)
            .flat_map(move |bb| (a0..=a1).filter_map(move |aa| self.grid[bb * self.gx + aa]))
            .filter(move |&j| j != i)
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.nearby(i, 1)
    }
}

/// Aligned basis angle of two samples: `phi_j` rotated by a multiple of pi/3
/// towards `phi_i`, then averaged.
fn pair_angle(phi_i: f64, phi_j: f64) -> f64 {
    phi_i + 0.5 * rosy_signed(phi_j, phi_i)
}

/// Places jittered samples and runs Gauss-Seidel sweeps of lattice-snapped
/// averaging.
pub fn optimize_positions(
    rosy: &RoSyField,
    domain: &Domain,
    params: &MeshParams,
) -> Result<PositionField, MeshError> {
    params.validate()?;
    let h = params.edge_length;
    let s = h * params.sample_spacing;
    let gx = (domain.width() / s).ceil().max(1.0) as usize;
    let gy = (domain.height() / s).ceil().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut samples = Vec::new();
    let mut grid = vec![None; gx * gy];
    let mut grid_index = Vec::new();
    for b in 0..gy {
        for a in 0..gx {
            let jx: f64 = rng.random_range(-0.25..0.25);
            let jy: f64 = rng.random_range(-0.25..0.25);
            let center = Vec2::new((a as f64 + 0.5) * s, (b as f64 + 0.5) * s);
            let jittered = center + Vec2::new(jx, jy) * s;
            let p = if domain.contains(&jittered) {
                jittered
            } else if domain.contains(&center) {
                center
            } else {
                continue;
            };
            grid[b * gx + a] = Some(samples.len());
            grid_index.push((a, b));
            samples.push(p);
        }
    }
    if samples.is_empty() {
        return Err(MeshError::EmptyDomain);
    }
    let reps: Vec<f64> = samples.iter().map(|p| rosy.rep_at(p)).collect();
    let mut field = PositionField {
        h,
        spacing: s,
        lattice: samples.clone(),
        samples,
        reps,
        gx,
        gy,
        grid,
        grid_index,
    };
    let n = field.samples.len();

    // Breadth-first order from the sample nearest the centroid.
    let centroid = field.samples.iter().fold(Vec2::zeros(), |a, p| a + p) / n as f64;
    let start = (0..n)
        .min_by(|&a, &b| {
            (field.samples[a] - centroid)
                .norm()
                .total_cmp(&(field.samples[b] - centroid).norm())
        })
        .expect("non-empty");
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut roots = std::iter::once(start).chain(0..n);
    while order.len() < n {
        let root = roots
            .by_ref()
            .find(|&r| !seen[r])
            .expect("unvisited sample");
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            let nbrs: Vec<usize> = field.neighbors(i).collect();
            for j in nbrs {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }

    let mut assigned = vec![false; n];
    for sweep in 0..=params.position_iters {
        for &i in &order {
            let snapped = snap_sample(&field, i, &assigned);
            field.lattice[i] = snapped;
            assigned[i] = true;
        }
        if sweep == 0 {
            debug_assert!(assigned.iter().all(|&a| a));
        }
    }
    Ok(field)
}

fn snap_sample(field: &PositionField, i: usize, assigned: &[bool]) -> Vec2 {
    let (p, phi, h) = (field.samples[i], field.reps[i], field.h);
    let mut acc: Option<Vec2> = assigned[i].then_some(field.lattice[i]);
    let mut count = if assigned[i] { 1.0 } else { 0.0 };
    for j in field.neighbors(i) {
        if !assigned[j] {
            continue;
        }
        let phi_ij = pair_angle(phi, field.reps[j]);
        let oj = field.lattice[j];
        let anchor = acc.unwrap_or(p);
        let translated = oj + nearest_lattice_vector(&(anchor - oj), phi_ij, h);
        acc = Some(match acc {
            None => translated,
            Some(a) => (a * count + translated) / (count + 1.0),
        });
        count += 1.0;
    }
    let a = acc.unwrap_or(p);
    a + nearest_lattice_vector(&(p - a), phi, h)
}

/// Direction class and adjacency of one mesh edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshEdge {
    pub v: [usize; 2],
    /// Layer family (0, 1, 2) the edge follows.
    pub class: u8,
    pub triangles: [Option<usize>; 2],
}

/// Triangle mesh whose edges follow the layer tangents.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldAlignedMesh {
    pub h: f64,
    pub vertices: Vec<Vec2>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub edges: Vec<MeshEdge>,
    /// Edge `k` of triangle `t` joins `triangles[t][k]` and `triangles[t][(k + 1) % 3]`.
    pub triangle_edges: Vec<[usize; 3]>,
}

impl FieldAlignedMesh {
    pub fn triangle(&self, t: usize) -> [Vec2; 3] {
        self.triangles[t].map(|v| self.vertices[v])
    }

    /// Builds edge adjacency; edge classes come from `class_of(a, b)`.
    pub fn from_triangles(
        h: f64,
        vertices: Vec<Vec2>,
        triangles: Vec<[usize; 3]>,
        class_of: impl Fn(&Vec2, &Vec2) -> u8,
    ) -> Self {
        let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut edges: Vec<MeshEdge> = Vec::new();
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let mut te = [0; 3];
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let e = *index.entry(key).or_insert_with(|| {
                    edges.push(MeshEdge {
                        v: [key.0, key.1],
                        class: class_of(&vertices[key.0], &vertices[key.1]),
                        triangles: [None, None],
                    });
                    edges.len() - 1
                });
                if edges[e].triangles[0].is_none() {
                    edges[e].triangles[0] = Some(t);
                } else {
                    edges[e].triangles[1] = Some(t);
                }
                te[k] = e;
            }
            triangle_edges.push(te);
        }
        Self {
            h,
            vertices,
            triangles,
            edges,
            triangle_edges,
        }
    }

    /// Whether a vertex lies on the mesh boundary.
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut b = vec![false; self.vertices.len()];
        for e in &self.edges {
            if e.triangles[1].is_none() {
                b[e.v[0]] = true;
                b[e.v[1]] = true;
            }
        }
        b
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges.len() as i64 + self.triangles.len() as i64
    }
}

/// Interior angles of a triangle in radians.
pub fn triangle_angles(t: &[Vec2; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..3 {
        let (a, b, c) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
        let (u, v) = (b - a, c - a);
        out[k] = u.angle(&v);
    }
    out
}

pub fn min_angle(t: &[Vec2; 3]) -> f64 {
    triangle_angles(t).into_iter().fold(f64::INFINITY, f64::min)
}

/// Layer family whose tangent is closest to the direction of `b - a` at the
/// midpoint.
pub fn edge_class(rosy: &RoSyField, a: &Vec2, b: &Vec2) -> u8 {
    let d = b - a;
    let angle = d.y.atan2(d.x);
    let tangents = rosy.tangents_at(&((a + b) * 0.5));
    (0..3)
        .min_by(|&x, &y| {
            line_deviation(angle, tangents[x]).total_cmp(&line_deviation(angle, tangents[y]))
        })
        .unwrap_or(0) as u8
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    /// Joins two sets, keeping the smaller root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }

    /// Dense labels ordered by smallest member.
    fn labels(&mut self) -> (Vec<usize>, usize) {
        let n = self.0.len();
        let mut map = vec![usize::MAX; n];
        let mut labels = vec![0; n];
        let mut count = 0;
        for i in 0..n {
            let r = self.find(i);
            if map[r] == usize::MAX {
                map[r] = count;
                count += 1;
            }
            labels[i] = map[r];
        }
        (labels, count)
    }
}

/// Uniform bucket grid over points for radius queries.
struct PointGrid {
    size: f64,
    buckets: BTreeMap<(i64, i64), Vec<usize>>,
}

impl PointGrid {
    fn new(points: &[Vec2], size: f64) -> Self {
        let mut buckets: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, size)).or_default().push(i);
        }
        Self { size, buckets }
    }

    fn key(p: &Vec2, size: f64) -> (i64, i64) {
        ((p.x / size).floor() as i64, (p.y / size).floor() as i64)
    }

    /// Indices within the 3x3 block of buckets around `p`.
    fn around(&self, p: &Vec2) -> Vec<usize> {
        let (kx, ky) = Self::key(p, self.size);
        let mut out = Vec::new();
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(v) = self.buckets.get(&(kx + dx, ky + dy)) {
                    out.extend_from_slice(v);
                }
            }
        }
        out
    }
}

/// Turns a converged position field into a triangle mesh.
pub fn extract_mesh(
    field: &PositionField,
    rosy: &RoSyField,
    domain: &Domain,
    params: &MeshParams,
) -> Result<FieldAlignedMesh, MeshError> {
    let h = field.h;
    let tol = params.tolerance * h;
    let n = field.samples.len();

    // Collapse samples whose snapped positions coincide.
    let mut uf = UnionFind::new(n);
    let grid = PointGrid::new(&field.lattice, tol);
    for i in 0..n {
        for j in grid.around(&field.lattice[i]) {
            if j > i && (field.lattice[i] - field.lattice[j]).norm() < tol {
                uf.union(i, j);
            }
        }
    }
    let (label, nv) = uf.labels();
    let mut positions = vec![Vec2::zeros(); nv];
    let mut counts = vec![0.0; nv];
    for i in 0..n {
        positions[label[i]] += field.lattice[i];
        counts[label[i]] += 1.0;
    }
    for (p, c) in positions.iter_mut().zip(&counts) {
        *p /= *c;
    }

    // Lattice edges between samples up to one edge length apart.
    let reach = (h / field.spacing).ceil() as usize + 1;
    let mut candidates: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        for j in field.nearby(i, reach) {
            if j < i
                || label[i] == label[j]
                || (field.samples[i] - field.samples[j]).norm() > 1.05 * h
            {
                continue;
            }
            let d = field.lattice[j] - field.lattice[i];
            let phi = pair_angle(field.reps[i], field.reps[j]);
            let mismatch = (0..6)
                .map(|k| {
                    let a = phi + k as f64 * SIXTH;
                    (d - Vec2::new(a.cos(), a.sin()) * h).norm()
                })
                .fold(f64::INFINITY, f64::min);
            if mismatch < tol {
                let key = (label[i].min(label[j]), label[i].max(label[j]));
                let e = candidates.entry(key).or_insert(f64::INFINITY);
                *e = e.min(mismatch);
            }
        }
    }

    // Snap boundary vertices, then merge near-duplicates.
    for p in positions.iter_mut() {
        let (q, dist) = domain.nearest_boundary(p);
        if !domain.contains(p) || dist < params.boundary_snap * h {
            *p = q;
        }
    }
    let mut merge = UnionFind::new(nv);
    let vgrid = PointGrid::new(&positions, tol);
    for i in 0..nv {
        for j in vgrid.around(&positions[i]) {
            if j > i && (positions[i] - positions[j]).norm() < tol {
                merge.union(i, j);
            }
        }
    }
    let (vlabel, nm) = merge.labels();
    let mut merged = vec![None; nm];
    for i in 0..nv {
        merged[vlabel[i]].get_or_insert(positions[i]);
    }
    let vertices: Vec<Vec2> = merged
        .into_iter()
        .map(|p| p.expect("label has a member"))
        .collect();
    let mut edge_list: Vec<(f64, usize, usize)> = Vec::new();
    let mut seen = BTreeMap::new();
    for (&(a, b), &m) in &candidates {
        let (a, b) = (vlabel[a], vlabel[b]);
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        let e = seen.entry(key).or_insert(f64::INFINITY);
        *e = e.min(m);
    }
    for (&(a, b), &m) in &seen {
        edge_list.push((m, a, b));
    }
    edge_list.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    // Greedy crossing removal, best-matching edges first.
    let bucket = h;
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    let mut buckets: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for &(_, a, b) in &edge_list {
        let (pa, pb) = (vertices[a], vertices[b]);
        let lo = (
            (pa.x.min(pb.x) / bucket).floor() as i64,
            (pa.y.min(pb.y) / bucket).floor() as i64,
        );
        let hi = (
            (pa.x.max(pb.x) / bucket).floor() as i64,
            (pa.y.max(pb.y) / bucket).floor() as i64,
        );
        let mut crosses = false;
        'search: for bx in lo.0..=hi.0 {
            for by in lo.1..=hi.1 {
                for &e in buckets.get(&(bx, by)).map(Vec::as_slice).unwrap_or(&[]) {
                    let (c, d) = accepted[e];
                    if c == a || c == b || d == a || d == b {
                        continue;
                    }
                    if segments_cross(&pa, &pb, &vertices[c], &vertices[d]) {
                        crosses = true;
                        break 'search;
                    }
                }
            }
        }
        if crosses {
            continue;
        }
        let id = accepted.len();
        accepted.push((a, b));
        for bx in lo.0..=hi.0 {
            for by in lo.1..=hi.1 {
                buckets.entry((bx, by)).or_default().push(id);
            }
        }
    }

    // Adjacency with dangling vertices pruned.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); vertices.len()];
    for &(a, b) in &accepted {
        adj[a].push(b);
        adj[b].push(a);
    }
    loop {
        let mut changed = false;
        for v in 0..adj.len() {
            if adj[v].len() == 1 {
                let u = adj[v][0];
                adj[v].clear();
                adj[u].retain(|&w| w != v);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for (v, list) in adj.iter_mut().enumerate() {
        let p = vertices[v];
        list.sort_by(|&a, &b| {
            let (da, db) = (vertices[a] - p, vertices[b] - p);
            da.y.atan2(da.x)
                .total_cmp(&db.y.atan2(db.x))
                .then(a.cmp(&b))
        });
    }

    // Faces of the planar embedding; each directed edge has its face on the left.
    let mut visited: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for u in 0..adj.len() {
        for &v in &adj[u] {
            if visited.contains_key(&(u, v)) {
                continue;
            }
            let mut face = vec![u];
            let (mut a, mut b) = (u, v);
            let mut ok = true;
            loop {
                visited.insert((a, b), ());
                let list = &adj[b];
                let idx = list
                    .iter()
                    .position(|&w| w == a)
                    .expect("symmetric adjacency");
                let w = list[(idx + list.len() - 1) % list.len()];
                a = b;
                b = w;
                if (a, b) == (u, v) {
                    break;
                }
                face.push(a);
                if face.len() > 64 {
                    ok = false;
                    break;
                }
            }
            if !ok || face.len() < 3 || face.len() > 8 {
                continue;
            }
            let pts: Vec<Vec2> = face.iter().map(|&i| vertices[i]).collect();
            if crate::domain::polygon_area(&pts) <= 0.0 {
                continue;
            }
            let mut distinct = face.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() != face.len() {
                continue;
            }
            if face.len() == 3 {
                triangles.push([face[0], face[1], face[2]]);
            } else {
                triangles.extend(ear_clip(&face, &vertices));
            }
        }
    }

    let min_area = 1e-6 * h * h;
    triangles.retain(|t| {
        let p = t.map(|v| vertices[v]);
        let centroid = (p[0] + p[1] + p[2]) / 3.0;
        orient(&p[0], &p[1], &p[2]) * 0.5 > min_area && domain.contains(&centroid)
    });
    let triangles = repair_manifold(triangles, vertices.len());
    if triangles.is_empty() {
        return Err(MeshError::NoTriangles);
    }

    // Compact vertex numbering in order of first use by index.
    let mut used = vec![false; vertices.len()];
    for t in &triangles {
        for &v in t {
            used[v] = true;
        }
    }
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut compact = Vec::new();
    for v in 0..vertices.len() {
        if used[v] {
            remap[v] = compact.len();
            compact.push(vertices[v]);
        }
    }
    let triangles: Vec<[usize; 3]> = triangles.into_iter().map(|t| t.map(|v| remap[v])).collect();
    let mesh =
        FieldAlignedMesh::from_triangles(h, compact, triangles, |a, b| edge_class(rosy, a, b));
    check_manifold(&mesh)?;
    Ok(mesh)
}

/// Triangulates a simple counter-clockwise polygon by repeatedly cutting the
/// ear with the largest minimum angle.
fn ear_clip(face: &[usize], vertices: &[Vec2]) -> Vec<[usize; 3]> {
    let mut poly = face.to_vec();
    let mut out = Vec::new();
    while poly.len() > 3 {
        let m = poly.len();
        let mut best: Option<(f64, usize)> = None;
        for k in 0..m {
            let (a, b, c) = (poly[(k + m - 1) % m], poly[k], poly[(k + 1) % m]);
            let t = [vertices[a], vertices[b], vertices[c]];
            if orient(&t[0], &t[1], &t[2]) <= 0.0 {
                continue;
            }
            let blocked = poly
                .iter()
                .filter(|&&v| v != a && v != b && v != c)
                .any(|&v| crate::domain::point_in_triangle(&vertices[v], &t));
            if blocked {
                continue;
            }
            let q = min_angle(&t);
            if best.is_none_or(|(bq, _)| q > bq) {
                best = Some((q, k));
            }
        }
        let Some((_, k)) = best else { return out };
        out.push([poly[(k + m - 1) % m], poly[k], poly[(k + 1) % m]]);
        poly.remove(k);
    }
    out.push([poly[0], poly[1], poly[2]]);
    out
}

/// Drops triangles so that every edge has at most two triangles, every
/// vertex has a single fan, and only the largest connected piece remains.
fn repair_manifold(mut triangles: Vec<[usize; 3]>, nv: usize) -> Vec<[usize; 3]> {
    loop {
        let mut changed = false;
        // Edges shared by more than two triangles keep the first two.
        let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        triangles.retain(|t| {
            let keys: Vec<(usize, usize)> = (0..3)
                .map(|k| (t[k].min(t[(k + 1) % 3]), t[k].max(t[(k + 1) % 3])))
                .collect();
            if keys.iter().any(|k| count.get(k).copied().unwrap_or(0) >= 2) {
                changed = true;
                return false;
            }
            for k in keys {
                *count.entry(k).or_insert(0) += 1;
            }
            true
        });
        // Vertex fans: keep the largest edge-connected fan around each vertex.
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                incident[v].push(t);
            }
        }
        let mut drop = vec![false; triangles.len()];
        for v in 0..nv {
            let fan = &incident[v];
            if fan.len() < 2 {
                continue;
            }
            let mut uf = UnionFind::new(fan.len());
            for a in 0..fan.len() {
                for b in a + 1..fan.len() {
                    let shared = triangles[fan[a]]
                        .iter()
                        .filter(|x| triangles[fan[b]].contains(x))
                        .count();
                    if shared >= 2 {
                        uf.union(a, b);
                    }
                }
            }
            let (labels, groups) = uf.labels();
            if groups > 1 {
                let mut sizes = vec![0; groups];
                for &l in &labels {
                    sizes[l] += 1;
                }
                let keep = (0..groups)
                    .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                for (k, &l) in labels.iter().enumerate() {
                    if l != keep {
                        drop[fan[k]] = true;
                    }
                }
            }
        }
        if drop.iter().any(|&d| d) {
            changed = true;
            let mut k = 0;
            triangles.retain(|_| {
                k += 1;
                !drop[k - 1]
            });
        }
        if !changed {
            break;
        }
    }
    // Largest edge-connected component.
    let mut uf = UnionFind::new(triangles.len());
    let mut by_edge: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            let key = (tri[k].min(tri[(k + 1) % 3]), tri[k].max(tri[(k + 1) % 3]));
            if let Some(&o) = by_edge.get(&key) {
                uf.union(t, o);
            } else {
                by_edge.insert(key, t);
            }
        }
    }
    let (labels, groups) = uf.labels();
    let mut sizes = vec![0; groups];
    for &l in &labels {
        sizes[l] += 1;
    }
    let Some(keep) = (0..groups).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))) else {
        return triangles;
    };
    triangles
        .into_iter()
        .zip(labels)
        .filter(|&(_, l)| l == keep)
        .map(|(t, _)| t)
        .collect()
}

fn check_manifold(mesh: &FieldAlignedMesh) -> Result<(), MeshError> {
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let p = mesh.triangle(t);
        if orient(&p[0], &p[1], &p[2]) <= 0.0 {
            return Err(MeshError::NonManifold(format!(
                "triangle {t} {tri:?} is inverted"
            )));
        }
    }
    for (e, edge) in mesh.edges.iter().enumerate() {
        if let [Some(a), Some(b)] = edge.triangles {
            // The two triangles must traverse the shared edge in opposite directions.
            let dir = |t: usize| {
                let tri = mesh.triangles[t];
                (0..3)
                    .find(|&k| tri[k] == edge.v[0] && tri[(k + 1) % 3] == edge.v[1])
                    .is_some()
            };
            if dir(a) == dir(b) {
                return Err(MeshError::NonManifold(format!(
                    "edge {e} has inconsistent orientation"
                )));
            }
        }
    }
    Ok(())
}

/// Quality statistics of a field-aligned mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshQuality {
    pub triangles: usize,
    /// Share of triangles with minimum angle at least 40 degrees.
    pub min_angle_40: f64,
    /// Share of edges with length in `[0.5h, 1.6h]`.
    pub edge_length_ok: f64,
    /// Share of edges within 15 degrees of their family's tangent.
    pub aligned: f64,
}

pub fn mesh_quality(mesh: &FieldAlignedMesh, rosy: &RoSyField) -> MeshQuality {
    let nt = mesh.triangles.len().max(1) as f64;
    let ne = mesh.edges.len().max(1) as f64;
    let good_angles = (0..mesh.triangles.len())
        .filter(|&t| min_angle(&mesh.triangle(t)) >= 40f64.to_radians())
        .count();
    let mut len_ok = 0;
    let mut aligned = 0;
    for e in &mesh.edges {
        let (a, b) = (mesh.vertices[e.v[0]], mesh.vertices[e.v[1]]);
        let l = (b - a).norm();
        if l >= 0.5 * mesh.h && l <= 1.6 * mesh.h {
            len_ok += 1;
        }
        let d = b - a;
        let tangent = rosy.tangents_at(&((a + b) * 0.5))[e.class as usize];
        if line_deviation(d.y.atan2(d.x), tangent) <= 15f64.to_radians() {
            aligned += 1;
        }
    }
    MeshQuality {
        triangles: mesh.triangles.len(),
        min_angle_40: good_angles as f64 / nt,
        edge_length_ok: len_ok as f64 / ne,
        aligned: aligned as f64 / ne,
    }
}

/// Full triangulation: direction field, positions and extraction.
pub fn triangulate(
    design: &DesignField,
    domain: &Domain,
    params: &MeshParams,
) -> Result<FieldAlignedMesh, MeshError> {
    let rosy = build_rosy(design, params.smoothing_iters);
    let field = optimize_positions(&rosy, domain, params)?;
    extract_mesh(&field, &rosy, domain, params)
}

//! Planar geometry of a masked grid domain, measured in simulation-cell units.

use nalgebra::Vector2;

use crate::fea::ProblemSpec;

pub type Vec2 = Vector2<f64>;

/// `z` component of the cross product.
pub fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Twice the signed area of `(a, b, c)`, positive when counter-clockwise.
pub fn orient(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    cross(&(b - a), &(c - a))
}

pub fn triangle_area(t: &[Vec2; 3]) -> f64 {
    0.5 * orient(&t[0], &t[1], &t[2])
}

/// Signed area of a simple polygon, positive when counter-clockwise.
pub fn polygon_area(p: &[Vec2]) -> f64 {
    let n = p.len();
    (0..n).map(|i| cross(&p[i], &p[(i + 1) % n])).sum::<f64>() * 0.5
}

pub fn point_in_triangle(p: &Vec2, t: &[Vec2; 3]) -> bool {
    let d0 = orient(&t[0], &t[1], p);
    let d1 = orient(&t[1], &t[2], p);
    let d2 = orient(&t[2], &t[0], p);
    let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
    let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
    !(neg && pos)
}

/// Point-in-convex-polygon test for a counter-clockwise polygon.
pub fn point_in_convex(p: &Vec2, poly: &[Vec2]) -> bool {
    let n = poly.len();
    n >= 3 && (0..n).all(|i| orient(&poly[i], &poly[(i + 1) % n], p) >= 0.0)
}

/// Closest point to `p` on segment `ab`.
pub fn closest_on_segment(p: &Vec2, a: &Vec2, b: &Vec2) -> Vec2 {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&d) / len2).clamp(0.0, 1.0);
    a + d * t
}

/// Whether segments `ab` and `cd` cross at a point interior to both.
pub fn segments_cross(a: &Vec2, b: &Vec2, c: &Vec2, d: &Vec2) -> bool {
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Clips a convex polygon by the half-plane `n . x >= c`.
pub fn clip_half_plane(poly: &[Vec2], n: &Vec2, c: f64) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let len = poly.len();
    for i in 0..len {
        let (p, q) = (poly[i], poly[(i + 1) % len]);
        let (fp, fq) = (n.dot(&p) - c, n.dot(&q) - c);
        if fp >= 0.0 {
            out.push(p);
        }
        if (fp >= 0.0) != (fq >= 0.0) {
            let t = fp / (fp - fq);
            out.push(p + (q - p) * t);
        }
    }
    out
}

/// Active region of a fine grid with cells of size `cell`.
#[derive(Debug, Clone)]
pub struct Domain {
    pub nx: usize,
    pub ny: usize,
    pub cell: f64,
    pub active: Vec<bool>,
    segments: Vec<[Vec2; 2]>,
    /// Segment buckets over unit-size bins.
    bins: Vec<Vec<usize>>,
    bins_x: usize,
    bins_y: usize,
}

impl Domain {
    /// Fine mask of a problem, in units of its simulation cells.
    pub fn from_problem(problem: &ProblemSpec) -> Self {
        Self::new(
            problem.nx,
            problem.ny,
            1.0 / problem.coarsening as f64,
            problem.active.clone(),
        )
    }

    pub fn new(nx: usize, ny: usize, cell: f64, active: Vec<bool>) -> Self {
        let is_active = |i: i64, j: i64| {
            i >= 0
                && j >= 0
                && (i as usize) < nx
                && (j as usize) < ny
                && active[j as usize * nx + i as usize]
        };
        let mut segments = Vec::new();
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                if !is_active(i, j) {
                    continue;
                }
                let p = |a: i64, b: i64| Vec2::new(a as f64 * cell, b as f64 * cell);
                if !is_active(i - 1, j) {
                    segments.push([p(i, j), p(i, j + 1)]);
                }
                if !is_active(i + 1, j) {
                    segments.push([p(i + 1, j), p(i + 1, j + 1)]);
                }
                if !is_active(i, j - 1) {
                    segments.push([p(i, j), p(i + 1, j)]);
                }
                if !is_active(i, j + 1) {
                    segments.push([p(i, j + 1), p(i + 1, j + 1)]);
                }
            }
        }
        let bins_x = (nx as f64 * cell).ceil() as usize + 1;
        let bins_y = (ny as f64 * cell).ceil() as usize + 1;
        let mut bins = vec![Vec::new(); bins_x * bins_y];
        for (k, s) in segments.iter().enumerate() {
            let m = (s[0] + s[1]) * 0.5;
            let (bx, by) = (
                (m.x as usize).min(bins_x - 1),
                (m.y as usize).min(bins_y - 1),
            );
            bins[by * bins_x + bx].push(k);
        }
        Self {
            nx,
            ny,
            cell,
            active,
            segments,
            bins,
            bins_x,
            bins_y,
        }
    }

    pub fn width(&self) -> f64 {
        self.nx as f64 * self.cell
    }

    pub fn height(&self) -> f64 {
        self.ny as f64 * self.cell
    }

    pub fn area(&self) -> f64 {
        self.active.iter().filter(|&&a| a).count() as f64 * self.cell * self.cell
    }

    pub fn boundary_segments(&self) -> &[[Vec2; 2]] {
        &self.segments
    }

    /// Fine cell containing `p`, if inside the grid.
    pub fn cell_at(&self, p: &Vec2) -> Option<usize> {
        let (i, j) = ((p.x / self.cell).floor(), (p.y / self.cell).floor());
        if i < 0.0 || j < 0.0 || i >= self.nx as f64 || j >= self.ny as f64 {
            return None;
        }
        Some(j as usize * self.nx + i as usize)
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        self.cell_at(p).is_some_and(|c| self.active[c])
    }

    pub fn cell_center(&self, cell: usize) -> Vec2 {
        let (i, j) = (cell % self.nx, cell / self.nx);
        Vec2::new((i as f64 + 0.5) * self.cell, (j as f64 + 0.5) * self.cell)
    }

    /// Nearest point on the domain boundary and its distance.
    pub fn nearest_boundary(&self, p: &Vec2) -> (Vec2, f64) {
        let (bx, by) = (p.x.floor() as i64, p.y.floor() as i64);
        let mut best = (*p, f64::INFINITY);
        let max_ring = self.bins_x.max(self.bins_y) as i64 + 1;
        for ring in 0..=max_ring {
            // Segments sit in the bin of their midpoint and are at most one
            // bin long, so everything from ring r on is at least r - 1.5 away.
            if ring as f64 - 1.5 > best.1 {
                break;
            }
            for j in by - ring..=by + ring {
                for i in bx - ring..=bx + ring {
                    if (i - bx).abs() != ring && (j - by).abs() != ring {
                        continue;
                    }
                    if i < 0 || j < 0 || i >= self.bins_x as i64 || j >= self.bins_y as i64 {
                        continue;
                    }
                    for &k in &self.bins[j as usize * self.bins_x + i as usize] {
                        let s = &self.segments[k];
                        let q = closest_on_segment(p, &s[0], &s[1]);
                        let d = (q - p).norm();
                        if d < best.1 {
                            best = (q, d);
                        }
                    }
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_of_square() {
        let d = Domain::new(4, 4, 0.5, vec![true; 16]);
        assert_eq!(d.boundary_segments().len(), 16);
        assert_eq!(d.area(), 4.0);
        let (q, dist) = d.nearest_boundary(&Vec2::new(1.0, 0.3));
        assert!((dist - 0.3).abs() < 1e-12 && q.y == 0.0);
        let (q, dist) = d.nearest_boundary(&Vec2::new(3.0, 1.0));
        assert!((dist - 1.0).abs() < 1e-12 && q.x == 2.0);
        assert!(d.contains(&Vec2::new(1.9, 1.9)) && !d.contains(&Vec2::new(2.1, 1.0)));
    }

    #[test]
    fn clipping_and_areas() {
        let sq = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.0, 1.0),
        ];
        assert_eq!(polygon_area(&sq), 1.0);
        let half = clip_half_plane(&sq, &Vec2::new(1.0, 0.0), 0.25);
        assert!((polygon_area(&half) - 0.75).abs() < 1e-15);
        let diag = clip_half_plane(&sq, &Vec2::new(-1.0, -1.0), -1.0);
        assert!((polygon_area(&diag) - 0.5).abs() < 1e-15);
        assert!(segments_cross(&sq[0], &sq[2], &sq[1], &sq[3]));
        assert!(!segments_cross(&sq[0], &sq[1], &sq[1], &sq[2]));
    }
}

//! Bundled benchmark problems.
//!
//! Shapes, supports and loads are given in simulation-cell units and sampled
//! on the fine grid, `fine = factor * sim`.

use crate::fea::{Fixation, LoadCase, PointLoad, ProblemSpec};
use crate::rank3::MaterialConstants;

/// Names accepted by [`by_name`].
pub const NAMES: [&str; 5] = ["femur", "mbb", "beam", "triangle", "cantilever"];

pub fn by_name(name: &str, factor: usize) -> Option<ProblemSpec> {
    match name {
        "femur" => Some(femur(factor)),
        "mbb" => Some(mbb(60, 30, factor)),
        "beam" => Some(beam(factor)),
        "triangle" => Some(triangle(factor)),
        "cantilever" => Some(cantilever(40, 20, factor)),
        _ => None,
    }
}

/// Fine-grid problem builder working in simulation units.
struct Builder {
    spec: ProblemSpec,
    f: f64,
}

impl Builder {
    fn new(
        name: &str,
        sim: (usize, usize),
        factor: usize,
        inside: impl Fn(f64, f64) -> bool,
    ) -> Self {
        let (nx, ny) = (sim.0 * factor, sim.1 * factor);
        let f = factor as f64;
        let mut active = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                active.push(inside((i as f64 + 0.5) / f, (j as f64 + 0.5) / f));
            }
        }
        let spec = ProblemSpec {
            name: name.into(),
            nx,
            ny,
            coarsening: factor,
            active,
            fixations: Vec::new(),
            load_cases: Vec::new(),
            weights: Vec::new(),
            volume_fraction: 0.5,
            width_bounds: (0.1, 0.5),
            material: MaterialConstants::default(),
        };
        Self { spec, f }
    }

    /// Fine nodes touching an active cell whose position satisfies `pred`.
    fn nodes_where(&self, pred: impl Fn(f64, f64) -> bool) -> Vec<usize> {
        let flags = self.spec.active_node_flags();
        (0..self.spec.num_nodes())
            .filter(|&n| {
                let (i, j) = self.spec.node_coords(n);
                flags[n] && pred(i as f64 / self.f, j as f64 / self.f)
            })
            .collect()
    }

    fn fixed(&self, pred: impl Fn(f64, f64) -> bool, x: bool, y: bool) -> Vec<Fixation> {
        self.nodes_where(pred)
            .into_iter()
            .map(|node| Fixation { node, x, y })
            .collect()
    }

    /// Whether a node lies on the boundary of the active region.
    fn on_boundary(&self, node: usize) -> bool {
        let (i, j) = self.spec.node_coords(node);
        let (nx, ny) = (self.spec.nx, self.spec.ny);
        let mut count = 0;
        for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            if i >= di
                && j >= dj
                && i - di < nx
                && j - dj < ny
                && self.spec.active[self.spec.cell(i - di, j - dj)]
            {
                count += 1;
            }
        }
        count > 0 && count < 4
    }

    /// Force spread evenly over the boundary nodes selected by `pred`.
    fn load(&self, pred: impl Fn(f64, f64) -> bool, force: [f64; 2]) -> Vec<PointLoad> {
        let nodes: Vec<usize> = self
            .nodes_where(pred)
            .into_iter()
            .filter(|&n| self.on_boundary(n))
            .collect();
        assert!(!nodes.is_empty(), "load region selects no node");
        let share = 1.0 / nodes.len() as f64;
        nodes
            .into_iter()
            .map(|node| PointLoad {
                node,
                force: [force[0] * share, force[1] * share],
            })
            .collect()
    }

    /// Node nearest to a point, among nodes touching active cells.
    fn nearest_node(&self, x: f64, y: f64) -> usize {
        let flags = self.spec.active_node_flags();
        (0..self.spec.num_nodes())
            .filter(|&n| flags[n])
            .min_by(|&a, &b| {
                let d = |n: usize| {
                    let (i, j) = self.spec.node_coords(n);
                    (i as f64 / self.f - x).powi(2) + (j as f64 / self.f - y).powi(2)
                };
                d(a).total_cmp(&d(b))
            })
            .expect("active node")
    }

    fn finish(mut self, volume_fraction: f64) -> ProblemSpec {
        let m = self.spec.load_cases.len();
        self.spec.weights = vec![1.0 / m as f64; m];
        self.spec.volume_fraction = volume_fraction;
        self.spec
    }
}

fn near(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Proximal-femur-like domain on a 116 x 150 simulation grid, two loads on
/// the head and the trochanter, clamped at the bottom of the shaft.
pub fn femur(factor: usize) -> ProblemSpec {
    let inside = |x: f64, y: f64| {
        // Shaft widening towards the top.
        let shaft = {
            let t = (y / 100.0).clamp(0.0, 1.0);
            let (l, r) = (45.0 - 10.0 * t, 93.0 + 8.0 * t);
            y <= 100.0 && x >= l && x <= r
        };
        let trochanter = ((x - 80.0) / 32.0).powi(2) + ((y - 108.0) / 34.0).powi(2) <= 1.0;
        let neck = {
            let (ax, ay, bx, by) = (76.0, 104.0, 34.0, 122.0);
            let (dx, dy) = (bx - ax, by - ay);
            let t = (((x - ax) * dx + (y - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let (px, py) = (ax + t * dx, ay + t * dy);
            ((x - px).powi(2) + (y - py).powi(2)).sqrt() <= 18.0
        };
        let head = (x - 28.0).powi(2) + (y - 124.0).powi(2) <= 24.0f64.powi(2);
        (shaft || trochanter || neck || head) && y < 150.0
    };
    let mut b = Builder::new("femur", (116, 150), factor, inside);
    b.spec.fixations = b.fixed(|_, y| y == 0.0, true, true);
    let head = b.load(|x, y| near(x, 26.0, 4.0) && y >= 146.0, [0.3, -1.0]);
    let trochanter = b.load(
        |x, y| x >= 96.0 && x <= 106.0 && near(y, 132.0, 4.0) && y >= 128.0,
        [-0.5, -0.6],
    );
    b.spec.load_cases = vec![
        LoadCase {
            loads: head,
            fixations: None,
        },
        LoadCase {
            loads: trochanter,
            fixations: None,
        },
    ];
    b.finish(0.5)
}

/// Half of a simply supported beam with a central load: symmetry on the
/// left edge, roller at the bottom right, load at the top left.
pub fn mbb(nx: usize, ny: usize, factor: usize) -> ProblemSpec {
    let (w, h) = (nx as f64, ny as f64);
    let mut b = Builder::new("mbb", (nx, ny), factor, |_, _| true);
    let mut fix = b.fixed(|x, _| x == 0.0, true, false);
    let roller = b.nearest_node(w, 0.0);
    fix.push(Fixation {
        node: roller,
        x: false,
        y: true,
    });
    b.spec.fixations = fix;
    let node = b.nearest_node(0.0, h);
    b.spec.load_cases = vec![LoadCase {
        loads: vec![PointLoad {
            node,
            force: [0.0, -1.0],
        }],
        fixations: None,
    }];
    b.finish(0.5)
}

/// 100 x 50 beam on two supports with five alternative top loads. Widths
/// may vanish or fill a cell, so the layout can leave parts of the domain empty.
pub fn beam(factor: usize) -> ProblemSpec {
    let (w, h) = (100.0, 50.0);
    let mut b = Builder::new("beam", (100, 50), factor, |_, _| true);
    let mut fix = b.fixed(|x, y| y == 0.0 && x <= 2.0, true, true);
    fix.extend(b.fixed(|x, y| y == 0.0 && x >= w - 2.0, false, true));
    b.spec.fixations = fix;
    b.spec.load_cases = (1..=5)
        .map(|k| {
            let x0 = w * k as f64 / 6.0;
            LoadCase {
                loads: b.load(|x, y| y == h && near(x, x0, 1.0), [0.0, -1.0]),
                fixations: None,
            }
        })
        .collect();
    b.spec.width_bounds = (1e-6, 1.0);
    b.finish(0.3)
}

/// Equilateral triangle on a 170 x 148 grid. Each case pulls the middle of
/// one side outwards while the two sides meeting at the opposite corner are
/// held near that corner.
pub fn triangle(factor: usize) -> ProblemSpec {
    let side = 170.0;
    let height = side * 3f64.sqrt() / 2.0;
    let corners = [(0.0, 0.0), (side, 0.0), (side / 2.0, height)];
    // Signed distance to the inside of edge (a -> b), counter-clockwise.
    let edge_dist = |a: (f64, f64), b: (f64, f64), x: f64, y: f64| {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        ((x - a.0) * (-dy) + (y - a.1) * dx) / (dx * dx + dy * dy).sqrt() * -1.0
    };
    let inside = move |x: f64, y: f64| {
        (0..3).all(|k| edge_dist(corners[k], corners[(k + 1) % 3], x, y) <= 0.0)
    };
    let mut b = Builder::new("triangle", (170, 148), factor, inside);
    let mut cases = Vec::new();
    for k in 0..3 {
        let (a, c) = (corners[k], corners[(k + 1) % 3]);
        let opposite = corners[(k + 2) % 3];
        let mid = ((a.0 + c.0) / 2.0, (a.1 + c.1) / 2.0);
        let len = ((c.0 - a.0).powi(2) + (c.1 - a.1).powi(2)).sqrt();
        // Outward normal of side k.
        let normal = ((c.1 - a.1) / len, -(c.0 - a.0) / len);
        let loads = b.load(
            |x, y| {
                (x - mid.0).powi(2) + (y - mid.1).powi(2) <= 4.0 && edge_dist(a, c, x, y) >= -1.5
            },
            [normal.0, normal.1],
        );
        let fixations = b.fixed(
            |x, y| {
                let near_corner =
                    (x - opposite.0).powi(2) + (y - opposite.1).powi(2) <= 20.0f64.powi(2);
                let on_side = (0..3)
                    .any(|e| e != k && edge_dist(corners[e], corners[(e + 1) % 3], x, y) >= -1.5);
                near_corner && on_side
            },
            true,
            true,
        );
        cases.push(LoadCase {
            loads,
            fixations: Some(fixations),
        });
    }
    b.spec.load_cases = cases;
    b.finish(0.5)
}

/// Cantilever clamped on the left with a tip load at mid-height on the right.
pub fn cantilever(nx: usize, ny: usize, factor: usize) -> ProblemSpec {
    let (w, h) = (nx as f64, ny as f64);
    let mut b = Builder::new("cantilever", (nx, ny), factor, |_, _| true);
    b.spec.fixations = b.fixed(|x, _| x == 0.0, true, true);
    let loads = b.load(|x, y| x == w && near(y, h / 2.0, 1.0), [0.0, -1.0]);
    b.spec.load_cases = vec![LoadCase {
        loads,
        fixations: None,
    }];
    b.finish(0.5)
}

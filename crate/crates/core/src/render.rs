//! SVG rendering of designs, meshes and lattices.

use std::fmt::Write as _;

use crate::dehomog::{covered_cells, LatticeDesign};
use crate::domain::{Domain, Vec2};
use crate::meshing::FieldAlignedMesh;
use crate::optimizer::DesignField;

const FAMILY_COLORS: [&str; 3] = ["#d62728", "#2ca02c", "#1f77b4"];

/// Streamline tracing settings, in simulation cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamlineParams {
    pub step: f64,
    /// Spacing of the seed grid.
    pub stride: usize,
    pub max_steps: usize,
}

impl Default for StreamlineParams {
    fn default() -> Self {
        Self {
            step: 0.5,
            stride: 6,
            max_steps: 2000,
        }
    }
}

/// Unit tangent of layer `family` in the cell containing `p`.
fn tangent_at(design: &DesignField, family: usize, p: &Vec2) -> Option<Vec2> {
    if p.x < 0.0 || p.y < 0.0 || p.x >= design.nx as f64 || p.y >= design.ny as f64 {
        return None;
    }
    let c = p.y as usize * design.nx + p.x as usize;
    if !design.active[c] {
        return None;
    }
    let theta = design.angles[c][family];
    Some(Vec2::new(-theta.sin(), theta.cos()))
}

/// Tangent at `p` oriented to agree with `prev`.
fn aligned(design: &DesignField, family: usize, p: &Vec2, prev: &Vec2) -> Option<Vec2> {
    tangent_at(design, family, p).map(|t| if t.dot(prev) < 0.0 { -t } else { t })
}

/// Streamlines of one tangent family, traced both ways from a stride grid of
/// seeds with midpoint steps. A line stops when it leaves the active cells or
/// enters a coarse bin already crossed by an earlier line.
pub fn streamlines(
    design: &DesignField,
    family: usize,
    params: &StreamlineParams,
) -> Vec<Vec<Vec2>> {
    let bin = (params.stride as f64 / 2.0).max(1.0);
    let bx = (design.nx as f64 / bin).ceil() as usize;
    let by = (design.ny as f64 / bin).ceil() as usize;
    let bin_of =
        |p: &Vec2| ((p.y / bin) as usize).min(by - 1) * bx + ((p.x / bin) as usize).min(bx - 1);
    let mut taken = vec![false; bx * by];
    let mut lines = Vec::new();
    let stride = params.stride.max(1);
    for j in (stride / 2..design.ny).step_by(stride) {
        for i in (stride / 2..design.nx).step_by(stride) {
            let seed = Vec2::new(i as f64 + 0.5, j as f64 + 0.5);
            let Some(t0) = tangent_at(design, family, &seed) else {
                continue;
            };
            if taken[bin_of(&seed)] {
                continue;
            }
            let mut halves = Vec::with_capacity(2);
            for dir in [t0, -t0] {
                let mut pts = vec![seed];
                let (mut p, mut d) = (seed, dir);
                for _ in 0..params.max_steps {
                    let Some(k1) = aligned(design, family, &p, &d) else {
                        break;
                    };
                    let mid = p + k1 * (0.5 * params.step);
                    let Some(k2) = aligned(design, family, &mid, &k1) else {
                        break;
                    };
                    let q = p + k2 * params.step;
                    if tangent_at(design, family, &q).is_none() {
                        break;
                    }
                    let (b, from) = (bin_of(&q), bin_of(&p));
                    if b != from && taken[b] {
                        break;
                    }
                    pts.push(q);
                    p = q;
                    d = k2;
                }
                halves.push(pts);
            }
            let mut line: Vec<Vec2> = halves[1].iter().rev().copied().collect();
            line.extend(halves[0].iter().skip(1));
            if line.len() < 2 {
                continue;
            }
            for p in &line {
                taken[bin_of(p)] = true;
            }
            lines.push(line);
        }
    }
    lines
}

/// Panel contents in simulation-cell units with `y` pointing up.
struct Panel {
    body: String,
}

fn panel_group(s: &mut String, panel: &Panel, offset_x: f64, width: f64, height: f64, scale: f64) {
    let _ = writeln!(
        s,
        "<g transform=\"translate({:.3} 0) scale({scale} {}) translate(0 {})\">",
        offset_x, -scale, -height
    );
    let _ = writeln!(
        s,
        "<rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>"
    );
    s.push_str(&panel.body);
    s.push_str("</g>\n");
}

fn polyline(s: &mut String, pts: &[Vec2], color: &str, width: f64) {
    s.push_str("<polyline fill=\"none\" points=\"");
    for p in pts {
        let _ = write!(s, "{:.3},{:.3} ", p.x, p.y);
    }
    let _ = writeln!(s, "\" stroke=\"{color}\" stroke-width=\"{width}\"/>");
}

fn density_panel(design: &DesignField, params: &StreamlineParams) -> Panel {
    let mut body = String::new();
    for c in 0..design.num_cells() {
        if !design.active[c] {
            continue;
        }
        let g = (255.0 * (1.0 - 0.8 * design.density(c))).round() as u8;
        let (i, j) = (c % design.nx, c / design.nx);
        let _ = writeln!(
            body,
            "<rect x=\"{i}\" y=\"{j}\" width=\"1.02\" height=\"1.02\" fill=\"rgb({g},{g},{g})\"/>"
        );
    }
    for family in 0..3 {
        for line in streamlines(design, family, params) {
            polyline(&mut body, &line, FAMILY_COLORS[family], 0.25);
        }
    }
    Panel { body }
}

fn mesh_panel(mesh: &FieldAlignedMesh) -> Panel {
    let mut body = String::new();
    for e in &mesh.edges {
        let (a, b) = (mesh.vertices[e.v[0]], mesh.vertices[e.v[1]]);
        let color = FAMILY_COLORS[(e.class as usize).min(2)];
        let _ = writeln!(
            body,
            "<line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"{color}\" stroke-width=\"0.3\"/>",
            a.x, a.y, b.x, b.y
        );
    }
    Panel { body }
}

fn lattice_panel(lattice: &LatticeDesign, domain: Option<&Domain>) -> Panel {
    let mut body = String::new();
    if let Some(d) = domain {
        if lattice.boundary_skin {
            let covered = covered_cells(&lattice.mesh, d.nx, d.ny, d.cell);
            for c in 0..d.active.len() {
                if d.active[c] && !covered[c] {
                    let (i, j) = (c % d.nx, c / d.nx);
                    let _ = writeln!(
                        body,
                        "<rect x=\"{:.4}\" y=\"{:.4}\" width=\"{:.4}\" height=\"{:.4}\"/>",
                        i as f64 * d.cell,
                        j as f64 * d.cell,
                        d.cell * 1.02,
                        d.cell * 1.02
                    );
                }
            }
        }
        for seg in d.boundary_segments() {
            let _ = writeln!(
                body,
                "<line x1=\"{:.4}\" y1=\"{:.4}\" x2=\"{:.4}\" y2=\"{:.4}\" stroke=\"#bbbbbb\" stroke-width=\"0.2\"/>",
                seg[0].x, seg[0].y, seg[1].x, seg[1].y
            );
        }
    }
    let tri_path = |s: &mut String, t: &[Vec2; 3]| {
        let _ = write!(
            s,
            "M{:.4} {:.4}L{:.4} {:.4}L{:.4} {:.4}Z",
            t[0].x, t[0].y, t[1].x, t[1].y, t[2].x, t[2].y
        );
    };
    body.push_str("<path fill=\"black\" fill-rule=\"evenodd\" d=\"");
    for (t, lt) in lattice.triangles.iter().enumerate() {
        let Some(lt) = lt else { continue };
        tri_path(&mut body, &lattice.mesh.triangle(t));
        if let Some(v) = lt.void {
            tri_path(&mut body, &v);
        }
    }
    body.push_str("\"/>\n<path fill=\"black\" d=\"");
    for p in &lattice.patches {
        tri_path(&mut body, p);
    }
    body.push_str("\"/>\n");
    Panel { body }
}

/// Side-by-side panels: density with layer streamlines, the field-aligned
/// mesh, and the lattice. Missing stages are left out.
pub fn render_svg(
    design: &DesignField,
    mesh: Option<&FieldAlignedMesh>,
    lattice: Option<&LatticeDesign>,
    domain: Option<&Domain>,
    scale: f64,
) -> String {
    let (w, h) = (design.nx as f64, design.ny as f64);
    let mut panels = vec![density_panel(design, &StreamlineParams::default())];
    if let Some(m) = mesh {
        panels.push(mesh_panel(m));
    }
    if let Some(l) = lattice {
        panels.push(lattice_panel(l, domain));
    }
    let gap = 0.05 * w * scale;
    let total_w = panels.len() as f64 * w * scale + (panels.len() - 1) as f64 * gap;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w:.0}\" height=\"{:.0}\" viewBox=\"0 0 {total_w:.3} {:.3}\">",
        h * scale,
        h * scale
    );
    for (k, p) in panels.iter().enumerate() {
        panel_group(&mut s, p, k as f64 * (w * scale + gap), w, h, scale);
    }
    s.push_str("</svg>\n");
    s
}

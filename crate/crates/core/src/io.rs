//! File formats for problems, checkpoints, meshes, lattices and reports.
//!
//! JSON files carry `format` and `version` fields; text files start with a
//! `<format> <major>.<minor>` line. Loaders reject unknown major versions.
//! Floats in text files use the shortest representation that round-trips.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::{FromStr, SplitWhitespace};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dehomog::{LatticeDesign, LatticeTriangle};
use crate::domain::Vec2;
use crate::fea::{Fixation, LoadCase, ProblemSpec};
use crate::meshing::FieldAlignedMesh;
use crate::optimizer::{DesignField, InitMode, OptimizerConfig};
use crate::rank3::MaterialConstants;
use crate::validate::EvaluationReport;

pub const MAJOR: u32 = 1;
pub const MINOR: u32 = 0;

pub const PROBLEM_FORMAT: &str = "trilattice-problem";
pub const CHECKPOINT_FORMAT: &str = "trilattice-checkpoint";
pub const MESH_FORMAT: &str = "trilattice-mesh";
pub const LATTICE_FORMAT: &str = "trilattice-lattice";
pub const REPORT_FORMAT: &str = "trilattice-report";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {format} data: {detail}")]
    Malformed {
        format: &'static str,
        detail: String,
    },
    #[error("expected a {expected} file, found {found:?}")]
    WrongFormat {
        expected: &'static str,
        found: String,
    },
    #[error("unsupported {format} version {found}; this build reads major version {MAJOR}")]
    UnsupportedVersion { format: &'static str, found: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn read_file(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn version_string() -> String {
    format!("{MAJOR}.{MINOR}")
}

fn check_header(expected: &'static str, format: &str, version: &str) -> Result<(), IoError> {
    if format != expected {
        return Err(IoError::WrongFormat {
            expected,
            found: format.to_string(),
        });
    }
    let major = version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    if major != Some(MAJOR) {
        return Err(IoError::UnsupportedVersion {
            format: expected,
            found: version.to_string(),
        });
    }
    Ok(())
}

/// Run lengths of alternating values, starting with a (possibly empty) run of `false`.
pub fn encode_mask(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_mask(runs: &[usize]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(runs.iter().sum());
    for (k, &len) in runs.iter().enumerate() {
        mask.extend(std::iter::repeat(k % 2 == 1).take(len));
    }
    mask
}

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    format: String,
    version: String,
    name: String,
    nx: usize,
    ny: usize,
    coarsening: usize,
    mask_runs: Vec<usize>,
    fixations: Vec<Fixation>,
    load_cases: Vec<LoadCase>,
    weights: Vec<f64>,
    volume_fraction: f64,
    width_bounds: (f64, f64),
    material: MaterialConstants,
}

pub fn problem_to_string(p: &ProblemSpec) -> Result<String, IoError> {
    let file = ProblemFile {
        format: PROBLEM_FORMAT.into(),
        version: version_string(),
        name: p.name.clone(),
        nx: p.nx,
        ny: p.ny,
        coarsening: p.coarsening,
        mask_runs: encode_mask(&p.active),
        fixations: p.fixations.clone(),
        load_cases: p.load_cases.clone(),
        weights: p.weights.clone(),
        volume_fraction: p.volume_fraction,
        width_bounds: p.width_bounds,
        material: p.material,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parses a problem; the result is validated.
pub fn problem_from_str(s: &str) -> Result<ProblemSpec, IoError> {
    let f: ProblemFile = serde_json::from_str(s)?;
    check_header(PROBLEM_FORMAT, &f.format, &f.version)?;
    let active = decode_mask(&f.mask_runs);
    let p = ProblemSpec {
        name: f.name,
        nx: f.nx,
        ny: f.ny,
        coarsening: f.coarsening,
        active,
        fixations: f.fixations,
        load_cases: f.load_cases,
        weights: f.weights,
        volume_fraction: f.volume_fraction,
        width_bounds: f.width_bounds,
        material: f.material,
    };
    p.validate().map_err(|e| IoError::Malformed {
        format: PROBLEM_FORMAT,
        detail: e.to_string(),
    })?;
    Ok(p)
}

pub fn write_problem(path: &Path, p: &ProblemSpec) -> Result<(), IoError> {
    write_file(path, &problem_to_string(p)?)
}

pub fn read_problem(path: &Path) -> Result<ProblemSpec, IoError> {
    problem_from_str(&read_file(path)?)
}

/// Optimizer settings recorded with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub init: InitMode,
    pub weight: f64,
    pub max_iter: usize,
    pub filter_radius: f64,
    pub free_orientations: bool,
}

impl From<&OptimizerConfig> for RunSettings {
    fn from(c: &OptimizerConfig) -> Self {
        Self {
            init: c.init,
            weight: c.weight,
            max_iter: c.max_iter,
            filter_radius: c.filter_radius,
            free_orientations: c.free_orientations,
        }
    }
}

/// Optimization result as stored on disk. Timings are kept elsewhere so that
/// reruns produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: String,
    pub problem: String,
    pub settings: RunSettings,
    pub c_star: f64,
    pub p_star: f64,
    pub compliance: f64,
    /// Compliance of the same problem optimized with free orientations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_free: Option<f64>,
    /// Filtered design seen by the simulation.
    pub design: DesignField,
    /// Raw design variables.
    pub raw: DesignField,
}

impl Checkpoint {
    pub fn new(
        problem: &str,
        settings: RunSettings,
        result: &crate::optimizer::OptimizationResult,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: version_string(),
            problem: problem.into(),
            settings,
            c_star: result.c_star,
            p_star: result.p_star,
            compliance: result.compliance,
            c_free: None,
            design: result.design.clone(),
            raw: result.raw.clone(),
        }
    }
}

pub fn checkpoint_to_string(c: &Checkpoint) -> Result<String, IoError> {
    Ok(serde_json::to_string(c)?)
}

pub fn checkpoint_from_str(s: &str) -> Result<Checkpoint, IoError> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: String,
    }
    let h: Header = serde_json::from_str(s)?;
    check_header(CHECKPOINT_FORMAT, &h.format, &h.version)?;
    let c: Checkpoint = serde_json::from_str(s)?;
    let n = c.design.nx * c.design.ny;
    for d in [&c.design, &c.raw] {
        if d.active.len() != n || d.alpha.len() != n || d.angles.len() != n {
            return Err(IoError::Malformed {
                format: CHECKPOINT_FORMAT,
                detail: "field sizes disagree".into(),
            });
        }
    }
    Ok(c)
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), IoError> {
    write_file(path, &checkpoint_to_string(c)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    checkpoint_from_str(&read_file(path)?)
}

/// Line-oriented reader for the text formats.
struct Lines<'a> {
    format: &'static str,
    lines: std::iter::Peekable<std::iter::Filter<std::str::Lines<'a>, fn(&&str) -> bool>>,
}

fn not_blank(l: &&str) -> bool {
    !l.trim().is_empty()
}

impl<'a> Lines<'a> {
    fn new(format: &'static str, s: &'a str) -> Result<Self, IoError> {
        let mut lines = Lines {
            format,
            lines: s.lines().filter(not_blank as fn(&&str) -> bool).peekable(),
        };
        let mut head = lines.next_line()?;
        let found = head.next().unwrap_or_default();
        let version = head.next().unwrap_or_default();
        check_header(format, found, version)?;
        Ok(lines)
    }

    fn err(&self, detail: impl Into<String>) -> IoError {
        IoError::Malformed {
            format: self.format,
            detail: detail.into(),
        }
    }

    fn next_line(&mut self) -> Result<SplitWhitespace<'a>, IoError> {
        match self.lines.next() {
            Some(l) => Ok(l.split_whitespace()),
            None => Err(self.err("unexpected end of file")),
        }
    }

    /// Reads a `<name> <count>` section header.
    fn section(&mut self, name: &str) -> Result<usize, IoError> {
        let mut l = self.next_line()?;
        if l.next() != Some(name) {
            return Err(self.err(format!("expected section `{name}`")));
        }
        self.field(&mut l, name)
    }

    fn field<T: FromStr>(&self, l: &mut SplitWhitespace<'_>, what: &str) -> Result<T, IoError> {
        l.next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| self.err(format!("bad or missing {what}")))
    }

    fn point(&self, l: &mut SplitWhitespace<'_>) -> Result<Vec2, IoError> {
        Ok(Vec2::new(self.field(l, "x")?, self.field(l, "y")?))
    }

    fn vertices(&mut self) -> Result<Vec<Vec2>, IoError> {
        let n = self.section("vertices")?;
        (0..n)
            .map(|_| {
                let mut l = self.next_line()?;
                self.point(&mut l)
            })
            .collect()
    }

    /// Reads `key value` lines until the next section named `stop`.
    fn metadata(&mut self, stop: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        while let Some(l) = self.lines.peek() {
            let mut it = l.split_whitespace();
            let key = it.next().unwrap_or_default();
            if key == stop {
                break;
            }
            out.push((key.to_string(), it.collect::<Vec<_>>().join(" ")));
            self.lines.next();
        }
        out
    }
}

fn write_vertices(s: &mut String, vertices: &[Vec2]) {
    let _ = writeln!(s, "vertices {}", vertices.len());
    for v in vertices {
        let _ = writeln!(s, "{} {}", v.x, v.y);
    }
}

/// Mesh text: vertices, counter-clockwise triangles, edges with their class.
pub fn mesh_to_string(mesh: &FieldAlignedMesh) -> String {
    let mut s = format!("{MESH_FORMAT} {}\nh {}\n", version_string(), mesh.h);
    write_vertices(&mut s, &mesh.vertices);
    let _ = writeln!(s, "triangles {}", mesh.triangles.len());
    for t in &mesh.triangles {
        let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "edges {}", mesh.edges.len());
    for e in &mesh.edges {
        let _ = writeln!(s, "{} {} {}", e.v[0], e.v[1], e.class);
    }
    s
}

fn read_triangles(lines: &mut Lines<'_>, nv: usize) -> Result<Vec<[usize; 3]>, IoError> {
    let n = lines.section("triangles")?;
    (0..n)
        .map(|_| {
            let mut l = lines.next_line()?;
            let t = [
                lines.field(&mut l, "vertex")?,
                lines.field(&mut l, "vertex")?,
                lines.field(&mut l, "vertex")?,
            ];
            if t.iter().any(|&v: &usize| v >= nv) {
                return Err(lines.err("triangle vertex out of range"));
            }
            Ok(t)
        })
        .collect()
}

/// Rebuilds a mesh and checks the listed edges against the triangles.
fn rebuild_mesh(
    lines: &Lines<'_>,
    h: f64,
    vertices: Vec<Vec2>,
    triangles: Vec<[usize; 3]>,
    edges: &[([usize; 2], u8)],
) -> Result<FieldAlignedMesh, IoError> {
    let classes: std::collections::BTreeMap<[usize; 2], u8> = edges.iter().copied().collect();
    let mesh = FieldAlignedMesh::from_triangles(h, vertices, triangles, |_, _| 0);
    if mesh.edges.len() != edges.len() {
        return Err(lines.err(format!(
            "{} edges listed, triangles define {}",
            edges.len(),
            mesh.edges.len()
        )));
    }
    let mut mesh = mesh;
    for (e, listed) in mesh.edges.iter_mut().zip(edges) {
        if e.v != listed.0 {
            return Err(lines.err(format!("edge {:?} listed out of order", listed.0)));
        }
        e.class = classes[&e.v];
    }
    Ok(mesh)
}

pub fn mesh_from_str(s: &str) -> Result<FieldAlignedMesh, IoError> {
    let mut lines = Lines::new(MESH_FORMAT, s)?;
    let h = lines.section_value("h")?;
    let vertices = lines.vertices()?;
    let triangles = read_triangles(&mut lines, vertices.len())?;
    let n = lines.section("edges")?;
    let mut edges = Vec::with_capacity(n);
    for _ in 0..n {
        let mut l = lines.next_line()?;
        let v = [
            lines.field(&mut l, "vertex")?,
            lines.field(&mut l, "vertex")?,
        ];
        edges.push((v, lines.field(&mut l, "class")?));
    }
    rebuild_mesh(&lines, h, vertices, triangles, &edges)
}

impl Lines<'_> {
    /// Reads a `<name> <value>` line.
    fn section_value<T: FromStr>(&mut self, name: &str) -> Result<T, IoError> {
        let mut l = self.next_line()?;
        if l.next() != Some(name) {
            return Err(self.err(format!("expected `{name}`")));
        }
        self.field(&mut l, name)
    }
}

pub fn write_mesh(path: &Path, mesh: &FieldAlignedMesh) -> Result<(), IoError> {
    write_file(path, &mesh_to_string(mesh))
}

pub fn read_mesh(path: &Path) -> Result<FieldAlignedMesh, IoError> {
    mesh_from_str(&read_file(path)?)
}

/// Lattice text: metadata, vertices, edges with their left and right insets
/// and class, per-triangle state, and gap patches.
pub fn lattice_to_string(lattice: &LatticeDesign) -> String {
    let mesh = &lattice.mesh;
    let kept = lattice.triangles.iter().filter(|t| t.is_some()).count();
    let mut s = format!("{LATTICE_FORMAT} {}\n", version_string());
    let _ = writeln!(s, "h {}", mesh.h);
    let _ = writeln!(s, "volume_fraction {}", lattice.volume_fraction);
    let _ = writeln!(s, "domain_area {}", lattice.domain_area);
    let _ = writeln!(s, "boundary_skin {}", u8::from(lattice.boundary_skin));
    let _ = writeln!(s, "skin_area {}", lattice.skin_area);
    let _ = writeln!(s, "kept_triangles {kept}");
    write_vertices(&mut s, &mesh.vertices);
    let insets = lattice.edge_insets();
    let _ = writeln!(s, "edges {}", mesh.edges.len());
    for (e, d) in mesh.edges.iter().zip(&insets) {
        let _ = writeln!(s, "{} {} {} {} {}", e.v[0], e.v[1], d[0], d[1], e.class);
    }
    // v0 v1 v2 target solved t w0 w1 w2 tangent0 tangent1 tangent2 layer0 layer1 layer2 void
    let _ = writeln!(s, "triangles {}", mesh.triangles.len());
    for (tri, lt) in mesh.triangles.iter().zip(&lattice.triangles) {
        let _ = write!(s, "{} {} {}", tri[0], tri[1], tri[2]);
        match lt {
            None => s.push_str(" dropped\n"),
            Some(lt) => {
                let _ = write!(s, " {} {} {}", lt.target_ratio, lt.solved_ratio, lt.t);
                for w in lt.widths.iter().chain(&lt.tangents) {
                    let _ = write!(s, " {w}");
                }
                for l in lt.edge_layers {
                    let _ = write!(s, " {l}");
                }
                match lt.void {
                    None => s.push_str(" solid\n"),
                    Some(v) => {
                        for p in v {
                            let _ = write!(s, " {} {}", p.x, p.y);
                        }
                        s.push('\n');
                    }
                }
            }
        }
    }
    let _ = writeln!(s, "patches {}", lattice.patches.len());
    for p in &lattice.patches {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            p[0].x, p[0].y, p[1].x, p[1].y, p[2].x, p[2].y
        );
    }
    s
}

pub fn lattice_from_str(s: &str) -> Result<LatticeDesign, IoError> {
    let mut lines = Lines::new(LATTICE_FORMAT, s)?;
    let meta = lines.metadata("vertices");
    let get = |key: &str| -> Result<f64, IoError> {
        meta.iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| IoError::Malformed {
                format: LATTICE_FORMAT,
                detail: format!("bad or missing {key}"),
            })
    };
    let h = get("h")?;
    let volume_fraction = get("volume_fraction")?;
    let domain_area = get("domain_area")?;
    let boundary_skin = get("boundary_skin")? != 0.0;
    let skin_area = get("skin_area")?;

    let vertices = lines.vertices()?;
    let n = lines.section("edges")?;
    let mut edges = Vec::with_capacity(n);
    let mut insets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut l = lines.next_line()?;
        let v = [
            lines.field(&mut l, "vertex")?,
            lines.field(&mut l, "vertex")?,
        ];
        insets.push([
            lines.field::<f64>(&mut l, "inset")?,
            lines.field::<f64>(&mut l, "inset")?,
        ]);
        edges.push((v, lines.field(&mut l, "class")?));
    }

    let n = lines.section("triangles")?;
    let mut triangles = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let mut l = lines.next_line()?;
        let tri: [usize; 3] = [
            lines.field(&mut l, "vertex")?,
            lines.field(&mut l, "vertex")?,
            lines.field(&mut l, "vertex")?,
        ];
        if tri.iter().any(|&v| v >= vertices.len()) {
            return Err(lines.err("triangle vertex out of range"));
        }
        triangles.push(tri);
        let rest: Vec<&str> = l.collect();
        if rest == ["dropped"] {
            states.push(None);
            continue;
        }
        let num = |k: usize| -> Result<f64, IoError> {
            rest.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| lines.err("bad triangle record"))
        };
        let layer = |k: usize| -> Result<usize, IoError> {
            rest.get(k)
                .and_then(|v| v.parse().ok())
                .filter(|&l: &usize| l < 3)
                .ok_or_else(|| lines.err("bad layer"))
        };
        let void = match rest.get(12) {
            Some(&"solid") if rest.len() == 13 => None,
            Some(_) if rest.len() == 18 => {
                let p = |k: usize| -> Result<Vec2, IoError> {
                    Ok(Vec2::new(num(12 + 2 * k)?, num(13 + 2 * k)?))
                };
                Some([p(0)?, p(1)?, p(2)?])
            }
            _ => return Err(lines.err("bad triangle record")),
        };
        states.push(Some(LatticeTriangle {
            target_ratio: num(0)?,
            solved_ratio: num(1)?,
            t: num(2)?,
            widths: [num(3)?, num(4)?, num(5)?],
            tangents: [num(6)?, num(7)?, num(8)?],
            edge_layers: [layer(9)?, layer(10)?, layer(11)?],
            insets: [0.0; 3],
            void,
        }));
    }

    let n = lines.section("patches")?;
    let mut patches = Vec::with_capacity(n);
    for _ in 0..n {
        let mut l = lines.next_line()?;
        patches.push([
            lines.point(&mut l)?,
            lines.point(&mut l)?,
            lines.point(&mut l)?,
        ]);
    }

    let mesh = rebuild_mesh(&lines, h, vertices, triangles, &edges)?;
    for (t, state) in states.iter_mut().enumerate() {
        let Some(lt) = state else { continue };
        for k in 0..3 {
            let e = mesh.triangle_edges[t][k];
            let side = if mesh.edges[e].v[0] == mesh.triangles[t][k] {
                0
            } else {
                1
            };
            lt.insets[k] = insets[e][side];
        }
    }
    Ok(LatticeDesign {
        mesh,
        triangles: states,
        patches,
        boundary_skin,
        skin_area,
        volume_fraction,
        domain_area,
    })
}

pub fn write_lattice(path: &Path, lattice: &LatticeDesign) -> Result<(), IoError> {
    write_file(path, &lattice_to_string(lattice))
}

pub fn read_lattice(path: &Path) -> Result<LatticeDesign, IoError> {
    lattice_from_str(&read_file(path)?)
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    format: String,
    version: String,
    #[serde(flatten)]
    report: EvaluationReport,
}

pub fn report_to_string(report: &EvaluationReport) -> Result<String, IoError> {
    let file = ReportFile {
        format: REPORT_FORMAT.into(),
        version: version_string(),
        report: report.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn report_from_str(s: &str) -> Result<EvaluationReport, IoError> {
    let f: ReportFile = serde_json::from_str(s)?;
    check_header(REPORT_FORMAT, &f.format, &f.version)?;
    Ok(f.report)
}

/// Writes the JSON report and, next to it, the table with extension `.txt`.
pub fn write_report(path: &Path, report: &EvaluationReport) -> Result<(), IoError> {
    write_file(path, &report_to_string(report)?)?;
    write_file(&path.with_extension("txt"), &format!("{report}\n"))
}

pub fn read_report(path: &Path) -> Result<EvaluationReport, IoError> {
    report_from_str(&read_file(path)?)
}

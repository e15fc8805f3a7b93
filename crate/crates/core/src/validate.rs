//! Fine-grid evaluation of lattices against the homogenized design.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dehomog::LatticeDesign;
use crate::domain::Vec2;
use crate::fea::{FeModel, FeaError, ProblemSpec, SolverKind};
use crate::optimizer::DesignField;
use crate::rank3::{elasticity_matrix_free, volume_fraction, ElasticityMatrix, Rank3Error};

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error(transparent)]
    Fea(#[from] FeaError),
    #[error(transparent)]
    Material(#[from] Rank3Error),
    #[error(
        "design grid {design:?} does not match the simulation grid {fine:?} of the fine problem"
    )]
    GridMismatch {
        design: (usize, usize),
        fine: (usize, usize),
    },
}

/// Center of fine cell `c` in simulation-cell units.
fn fine_center(fine: &ProblemSpec, c: usize) -> Vec2 {
    let f = fine.coarsening as f64;
    Vec2::new(
        ((c % fine.nx) as f64 + 0.5) / f,
        ((c / fine.nx) as f64 + 0.5) / f,
    )
}

/// Fine cells whose centers lie in lattice material.
pub fn rasterize(lattice: &LatticeDesign, fine: &ProblemSpec) -> Vec<bool> {
    let f = fine.coarsening as f64;
    let mut solid = vec![false; fine.num_cells()];
    let mut mark = |tri: &[Vec2; 3], test: &dyn Fn(&Vec2) -> bool| {
        let lo = tri
            .iter()
            .fold(Vec2::new(f64::INFINITY, f64::INFINITY), |a, p| a.inf(p));
        let hi = tri
            .iter()
            .fold(Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| {
                a.sup(p)
            });
        let i0 = (lo.x * f - 0.5).floor().max(0.0) as usize;
        let j0 = (lo.y * f - 0.5).floor().max(0.0) as usize;
        let i1 = ((hi.x * f - 0.5).ceil().max(0.0) as usize).min(fine.nx - 1);
        let j1 = ((hi.y * f - 0.5).ceil().max(0.0) as usize).min(fine.ny - 1);
        for j in j0..=j1 {
            for i in i0..=i1 {
                let c = fine.cell(i, j);
                if fine.active[c] && !solid[c] && test(&fine_center(fine, c)) {
                    solid[c] = true;
                }
            }
        }
    };
    for t in 0..lattice.triangles.len() {
        if lattice.triangles[t].is_some() {
            mark(&lattice.mesh.triangle(t), &|p| lattice.is_solid(t, p));
        }
    }
    for patch in &lattice.patches {
        mark(patch, &|p| crate::domain::point_in_triangle(p, patch));
    }
    if lattice.boundary_skin {
        let covered = crate::dehomog::covered_cells(&lattice.mesh, fine.nx, fine.ny, 1.0 / f);
        for c in 0..solid.len() {
            solid[c] |= fine.active[c] && !covered[c];
        }
    }
    // Loaded nodes keep their active cells solid so no load acts on void.
    for case in &fine.load_cases {
        for load in &case.loads {
            let (i, j) = fine.node_coords(load.node);
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                if i >= di && j >= dj && i - di < fine.nx && j - dj < fine.ny {
                    let c = fine.cell(i - di, j - dj);
                    solid[c] |= fine.active[c];
                }
            }
        }
    }
    solid
}

/// Widths and angles of every fine cell, interpolated from the design.
/// Fine cells outside the design mask take the nearest active design cell.
pub fn project_specs(
    design: &DesignField,
    fine: &ProblemSpec,
) -> Result<Vec<Option<([f64; 3], [f64; 3])>>, ValidateError> {
    if fine.simulation_resolution() != (design.nx, design.ny) {
        return Err(ValidateError::GridMismatch {
            design: (design.nx, design.ny),
            fine: fine.simulation_resolution(),
        });
    }
    Ok((0..fine.num_cells())
        .map(|c| {
            if !fine.active[c] {
                return None;
            }
            let p = fine_center(fine, c);
            design.interpolate(p.x, p.y).or_else(|| {
                let (ci, cj) = (p.x as i64, p.y as i64);
                let mut best: Option<(f64, usize)> = None;
                for r in 1..=2i64 {
                    for j in cj - r..=cj + r {
                        for i in ci - r..=ci + r {
                            if i < 0 || j < 0 || i >= design.nx as i64 || j >= design.ny as i64 {
                                continue;
                            }
                            let k = j as usize * design.nx + i as usize;
                            let d = (Vec2::new(i as f64 + 0.5, j as f64 + 0.5) - p).norm();
                            if design.active[k] && best.is_none_or(|b| d < b.0) {
                                best = Some((d, k));
                            }
                        }
                    }
                    if best.is_some() {
                        break;
                    }
                }
                best.map(|(_, k)| (design.alpha[k], design.angles[k]))
            })
        })
        .collect())
}

/// Fine-grid comparison of a lattice with its homogenized design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub problem: String,
    pub fine_resolution: (usize, usize),
    /// Compliance of the design optimized with free orientations, if known.
    pub c_star: Option<f64>,
    pub c0: f64,
    pub v0: f64,
    /// Optimization time in seconds.
    pub t0: Option<f64>,
    pub c: f64,
    pub v: f64,
    /// De-homogenization time in seconds.
    pub t: Option<f64>,
    pub xi: f64,
    pub c0_per_case: Vec<f64>,
    pub c_per_case: Vec<f64>,
}

/// Relative change of compliance times volume.
pub fn design_deviation(c: f64, v: f64, c0: f64, v0: f64) -> f64 {
    (c * v - c0 * v0) / (c0 * v0)
}

/// Fine-grid compliances of the lattice raster and of the projected design.
pub fn evaluate(
    lattice: &LatticeDesign,
    design: &DesignField,
    fine: &ProblemSpec,
    solver: SolverKind,
) -> Result<EvaluationReport, ValidateError> {
    let specs = project_specs(design, fine)?;
    let mat = &fine.material;
    let mut model = FeModel::with_solver(fine, solver)?;

    let mut projected = Vec::with_capacity(specs.len());
    let (mut rho_sum, mut n) = (0.0, 0usize);
    for s in &specs {
        match s {
            Some((alpha, angles)) => {
                projected.push(elasticity_matrix_free(alpha, angles, mat)?);
                rho_sum += volume_fraction(alpha);
                n += 1;
            }
            None => projected.push(mat.void()),
        }
    }
    let homogenized = model.solve(&projected)?;

    let solid = rasterize(lattice, fine);
    let cells: Vec<ElasticityMatrix> = solid
        .iter()
        .map(|&s| if s { mat.solid() } else { mat.void() })
        .collect();
    let raster = model.solve(&cells)?;

    let v0 = rho_sum / n.max(1) as f64;
    let v = solid.iter().filter(|&&s| s).count() as f64 / fine.num_active().max(1) as f64;
    let (c0, c) = (homogenized.total_compliance, raster.total_compliance);
    Ok(EvaluationReport {
        problem: fine.name.clone(),
        fine_resolution: (fine.nx, fine.ny),
        c_star: None,
        c0,
        v0,
        t0: None,
        c,
        v,
        t: None,
        xi: design_deviation(c, v, c0, v0),
        c0_per_case: homogenized.compliance_per_case,
        c_per_case: raster.compliance_per_case,
    })
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt =
            |x: Option<f64>, prec: usize| x.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        writeln!(
            f,
            "{:<12} {:>10} {:>10} {:>6} {:>9} {:>10} {:>6} {:>9} {:>8}",
            "problem", "C*", "C0", "V0", "t0 (s)", "C", "V", "t (s)", "xi"
        )?;
        write!(
            f,
            "{:<12} {:>10} {:>10.4} {:>6.3} {:>9} {:>10.4} {:>6.3} {:>9} {:>7.2}%",
            self.problem,
            opt(self.c_star, 4),
            self.c0,
            self.v0,
            opt(self.t0, 1),
            self.c,
            self.v,
            opt(self.t, 1),
            100.0 * self.xi
        )
    }
}

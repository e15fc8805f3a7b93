//! Plane-stress bilinear finite elements on Cartesian grids of unit cells.
//!
//! Nodes are numbered row by row, `node(i, j) = j * (nx + 1) + i`, and cells
//! likewise, `cell(i, j) = j * nx + i`. Each node carries two displacement
//! components, `dof = 2 * node + component`.

use std::collections::BTreeMap;

use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Mat, Side};
use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rank3::{ElasticityMatrix, MaterialConstants};

pub type ElementMatrix = SMatrix<f64, 8, 8>;

#[derive(Debug, Error)]
pub enum FeaError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("stiffness matrix is singular: {0}")]
    Singular(String),
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("solution residual {0:e} exceeds tolerance")]
    Residual(f64),
    #[error("linear algebra failure: {0}")]
    Factorization(String),
}

/// Number of threads used by the sparse factorization; 0 uses all cores.
pub fn set_solver_threads(threads: usize) {
    faer::set_global_parallelism(if threads == 1 {
        faer::Par::Seq
    } else {
        faer::Par::rayon(threads)
    });
}

/// A constrained node. Prescribed displacements are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fixation {
    pub node: usize,
    pub x: bool,
    pub y: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLoad {
    pub node: usize,
    pub force: [f64; 2],
}

/// One loading condition. `fixations` overrides the problem-wide supports
/// when the supports change together with the load.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadCase {
    pub loads: Vec<PointLoad>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixations: Option<Vec<Fixation>>,
}

/// Structured-grid elasticity problem with several load cases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub name: String,
    /// Cells along x and y at this resolution.
    pub nx: usize,
    pub ny: usize,
    /// Integer factor between this grid and the simulation grid.
    pub coarsening: usize,
    /// Per-cell activity; inactive cells and the nodes touching only them
    /// are left out of the analysis.
    pub active: Vec<bool>,
    pub fixations: Vec<Fixation>,
    pub load_cases: Vec<LoadCase>,
    /// Case weights, summing to one.
    pub weights: Vec<f64>,
    pub volume_fraction: f64,
    /// Lower and upper layer-width bounds.
    pub width_bounds: (f64, f64),
    pub material: MaterialConstants,
}

impl ProblemSpec {
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn node_coords(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Node indices of a cell, counter-clockwise from the lower-left corner.
    pub fn cell_nodes(&self, cell: usize) -> [usize; 4] {
        let (i, j) = (cell % self.nx, cell / self.nx);
        [
            self.node(i, j),
            self.node(i + 1, j),
            self.node(i + 1, j + 1),
            self.node(i, j + 1),
        ]
    }

    pub fn simulation_resolution(&self) -> (usize, usize) {
        (self.nx / self.coarsening, self.ny / self.coarsening)
    }

    pub fn case_fixations(&self, case: usize) -> &[Fixation] {
        self.load_cases[case]
            .fixations
            .as_deref()
            .unwrap_or(&self.fixations)
    }

    /// Total applied force of one load case.
    pub fn load_resultant(&self, case: usize) -> [f64; 2] {
        self.load_cases[case]
            .loads
            .iter()
            .fold([0.0, 0.0], |acc, l| {
                [acc[0] + l.force[0], acc[1] + l.force[1]]
            })
    }

    pub fn validate(&self) -> Result<(), FeaError> {
        let bad = |msg: String| Err(FeaError::InvalidProblem(msg));
        if self.nx == 0 || self.ny == 0 {
            return bad("grid must have at least one cell".into());
        }
        if self.coarsening == 0 || self.nx % self.coarsening != 0 || self.ny % self.coarsening != 0
        {
            return bad(format!(
                "coarsening factor {} must divide the resolution {}x{}",
                self.coarsening, self.nx, self.ny
            ));
        }
        if self.active.len() != self.num_cells() {
            return bad(format!(
                "mask has {} entries, expected {}",
                self.active.len(),
                self.num_cells()
            ));
        }
        if self.num_active() == 0 {
            return bad("mask has no active cells".into());
        }
        if self.load_cases.is_empty() {
            return bad("at least one load case is required".into());
        }
        if self.weights.len() != self.load_cases.len() {
            return bad("one weight per load case is required".into());
        }
        if self.weights.iter().any(|&w| !(w >= 0.0))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "weights {:?} must be non-negative and sum to one",
                self.weights
            ));
        }
        if !(self.volume_fraction > 0.0 && self.volume_fraction < 1.0) {
            return bad(format!(
                "volume fraction {} must lie in (0, 1)",
                self.volume_fraction
            ));
        }
        let (lo, hi) = self.width_bounds;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "width bounds ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            ));
        }
        let touches_active = self.active_node_flags();
        let check_node = |node: usize, what: &str| -> Result<(), FeaError> {
            if node >= self.num_nodes() {
                return Err(FeaError::InvalidProblem(format!(
                    "{what} node {node} is outside the grid"
                )));
            }
            if !touches_active[node] {
                return Err(FeaError::InvalidProblem(format!(
                    "{what} node {node} does not touch an active cell"
                )));
            }
            Ok(())
        };
        for f in &self.fixations {
            check_node(f.node, "fixation")?;
        }
        for case in &self.load_cases {
            for l in &case.loads {
                check_node(l.node, "load")?;
            }
            for f in case.fixations.iter().flatten() {
                check_node(f.node, "fixation")?;
            }
        }
        Ok(())
    }

    /// Nodes that belong to at least one active cell.
    pub fn active_node_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_nodes()];
        for cell in 0..self.num_cells() {
            if self.active[cell] {
                for n in self.cell_nodes(cell) {
                    flags[n] = true;
                }
            }
        }
        flags
    }
}

/// Displacements and compliances of all load cases.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub displacements: Vec<Vec<f64>>,
    pub compliance_per_case: Vec<f64>,
    pub total_compliance: f64,
}

const GAUSS: f64 = 0.577_350_269_189_625_8;

/// Strain-displacement matrix of the unit square element at local `(xi, eta)`.
pub fn strain_matrix(xi: f64, eta: f64) -> SMatrix<f64, 3, 8> {
    // dN/dxi and dN/deta for nodes ordered (-1,-1), (1,-1), (1,1), (-1,1);
    // the Jacobian of the unit cell is diag(1/2, 1/2).
    let dxi = [-(1.0 - eta), 1.0 - eta, 1.0 + eta, -(1.0 + eta)].map(|v| v / 4.0 * 2.0);
    let deta = [-(1.0 - xi), -(1.0 + xi), 1.0 + xi, 1.0 - xi].map(|v| v / 4.0 * 2.0);
    let mut b = SMatrix::<f64, 3, 8>::zeros();
    for a in 0..4 {
        b[(0, 2 * a)] = dxi[a];
        b[(1, 2 * a + 1)] = deta[a];
        b[(2, 2 * a)] = deta[a];
        b[(2, 2 * a + 1)] = dxi[a];
    }
    b
}

fn gauss_points() -> [(f64, f64); 4] {
    [
        (-GAUSS, -GAUSS),
        (GAUSS, -GAUSS),
        (GAUSS, GAUSS),
        (-GAUSS, GAUSS),
    ]
}

/// Element stiffness of a unit square cell, 2x2 Gauss quadrature.
pub fn element_stiffness(s: &ElasticityMatrix) -> ElementMatrix {
    let mut k = ElementMatrix::zeros();
    for (xi, eta) in gauss_points() {
        let b = strain_matrix(xi, eta);
        k += b.transpose() * s.0 * b * 0.25;
    }
    k
}

/// Stiffness basis `G[a][b] = integral of B_a^T B_b`, so that
/// `K_e = sum_ab S_ab G[a][b]`.
fn stiffness_basis() -> [[ElementMatrix; 3]; 3] {
    let mut g = [[ElementMatrix::zeros(); 3]; 3];
    for (xi, eta) in gauss_points() {
        let b = strain_matrix(xi, eta);
        for p in 0..3 {
            for q in 0..3 {
                g[p][q] += b.row(p).transpose() * b.row(q) * 0.25;
            }
        }
    }
    g
}

/// Integrated strain outer product `integral of eps eps^T` over one cell.
/// Contracting it with a constitutive matrix gives twice the strain energy.
pub fn strain_moment(u_e: &SMatrix<f64, 8, 1>) -> Matrix3<f64> {
    let mut q = Matrix3::zeros();
    for (xi, eta) in gauss_points() {
        let eps: Vector3<f64> = strain_matrix(xi, eta) * u_e;
        q += eps * eps.transpose() * 0.25;
    }
    q
}

/// Linear solver used for the reduced system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    /// Sparse Cholesky with fill-reducing ordering.
    Direct,
    /// Jacobi-preconditioned conjugate gradient.
    Pcg {
        tolerance: f64,
        max_iterations: usize,
    },
}

impl Default for SolverKind {
    fn default() -> Self {
        SolverKind::Direct
    }
}

const RESIDUAL_TOL: f64 = 1e-8;
const MAX_REFINEMENTS: usize = 4;
const BACKWARD_TOL: f64 = 1e-12;

/// Reduced system for one set of supports.
struct ConstraintGroup {
    cases: Vec<usize>,
    /// Global dof -> reduced index.
    dof_map: Vec<Option<usize>>,
    n_free: usize,
    /// Lower-triangular CSC pattern of the reduced stiffness.
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    symbolic: Option<SymbolicLlt<usize>>,
}

/// Assembled-and-factorizable finite element model of a problem. The sparsity
/// pattern and symbolic factorization are computed once and reused.
pub struct FeModel {
    nx: usize,
    ny: usize,
    /// Cells outside the mask are left out of the stiffness.
    active: Vec<bool>,
    groups: Vec<ConstraintGroup>,
    loads: Vec<Vec<f64>>,
    weights: Vec<f64>,
    basis: [[ElementMatrix; 3]; 3],
    solver: SolverKind,
}

impl FeModel {
    pub fn new(problem: &ProblemSpec) -> Result<Self, FeaError> {
        Self::with_solver(problem, SolverKind::Direct)
    }

    pub fn with_solver(problem: &ProblemSpec, solver: SolverKind) -> Result<Self, FeaError> {
        problem.validate()?;
        let ndof = 2 * problem.num_nodes();
        let mut by_support: BTreeMap<Vec<Fixation>, Vec<usize>> = BTreeMap::new();
        for case in 0..problem.load_cases.len() {
            let mut fix = problem.case_fixations(case).to_vec();
            fix.sort();
            fix.dedup();
            by_support.entry(fix).or_default().push(case);
        }
        let node_active = problem.active_node_flags();
        let mut groups = Vec::new();
        for (fix, cases) in by_support {
            check_rigid_modes(problem, &fix)?;
            // Nodes that touch no active cell carry no stiffness and are dropped.
            let mut fixed: Vec<bool> = node_active.iter().flat_map(|&a| [!a, !a]).collect();
            for f in &fix {
                fixed[2 * f.node] |= f.x;
                fixed[2 * f.node + 1] |= f.y;
            }
            let mut dof_map = vec![None; ndof];
            let mut n_free = 0;
            for (d, slot) in dof_map.iter_mut().enumerate() {
                if !fixed[d] {
                    *slot = Some(n_free);
                    n_free += 1;
                }
            }
            let (col_ptr, row_idx) = lower_pattern(problem, &dof_map, n_free);
            groups.push(ConstraintGroup {
                cases,
                dof_map,
                n_free,
                col_ptr,
                row_idx,
                symbolic: None,
            });
        }
        let loads = (0..problem.load_cases.len())
            .map(|c| {
                let mut f = vec![0.0; ndof];
                for l in &problem.load_cases[c].loads {
                    f[2 * l.node] += l.force[0];
                    f[2 * l.node + 1] += l.force[1];
                }
                f
            })
            .collect();
        Ok(Self {
            nx: problem.nx,
            ny: problem.ny,
            active: problem.active.clone(),
            groups,
            loads,
            weights: problem.weights.clone(),
            basis: stiffness_basis(),
            solver,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    fn cell_dofs(&self, cell: usize) -> [usize; 8] {
        let (i, j) = (cell % self.nx, cell / self.nx);
        let n0 = j * (self.nx + 1) + i;
        let nodes = [n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1];
        let mut d = [0; 8];
        for (a, n) in nodes.iter().enumerate() {
            d[2 * a] = 2 * n;
            d[2 * a + 1] = 2 * n + 1;
        }
        d
    }

    /// Element displacement vector of one cell.
    pub fn element_displacements(&self, u: &[f64], cell: usize) -> SMatrix<f64, 8, 1> {
        let d = self.cell_dofs(cell);
        SMatrix::<f64, 8, 1>::from_fn(|a, _| u[d[a]])
    }

    fn element_matrix(&self, s: &ElasticityMatrix) -> ElementMatrix {
        let mut k = ElementMatrix::zeros();
        for p in 0..3 {
            for q in 0..3 {
                let v = s.0[(p, q)];
                if v != 0.0 {
                    k += self.basis[p][q] * v;
                }
            }
        }
        k
    }

    fn assemble(&self, group: &ConstraintGroup, cells: &[ElasticityMatrix]) -> Vec<f64> {
        let mut values = vec![0.0; group.row_idx.len()];
        for (cell, s) in cells.iter().enumerate() {
            if !self.active[cell] {
                continue;
            }
            let ke = self.element_matrix(s);
            let dofs = self.cell_dofs(cell);
            for a in 0..8 {
                let Some(r) = group.dof_map[dofs[a]] else {
                    continue;
                };
                for b in 0..8 {
                    let Some(c) = group.dof_map[dofs[b]] else {
                        continue;
                    };
                    if r < c {
                        continue;
                    }
                    let col = &group.row_idx[group.col_ptr[c]..group.col_ptr[c + 1]];
                    let pos = col.binary_search(&r).expect("entry in pattern");
                    values[group.col_ptr[c] + pos] += ke[(a, b)];
                }
            }
        }
        values
    }

    /// Solves all load cases for the given per-cell constitutive matrices
    /// (one per cell; entries of inactive cells are ignored).
    pub fn solve(&mut self, cells: &[ElasticityMatrix]) -> Result<SolveResult, FeaError> {
        if cells.len() != self.num_cells() {
            return Err(FeaError::InvalidProblem(format!(
                "expected {} constitutive matrices, got {}",
                self.num_cells(),
                cells.len()
            )));
        }
        let ncases = self.loads.len();
        let ndof = self.loads[0].len();
        let mut displacements = vec![Vec::new(); ncases];
        for gi in 0..self.groups.len() {
            let values = self.assemble(&self.groups[gi], cells);
            let group = &self.groups[gi];
            let rhs: Vec<Vec<f64>> = group
                .cases
                .iter()
                .map(|&c| {
                    let mut r = vec![0.0; group.n_free];
                    for (d, m) in group.dof_map.iter().enumerate() {
                        if let Some(k) = m {
                            r[*k] = self.loads[c][d];
                        }
                    }
                    r
                })
                .collect();
            let solutions = match self.solver {
                SolverKind::Direct => self.solve_direct(gi, &values, &rhs)?,
                SolverKind::Pcg {
                    tolerance,
                    max_iterations,
                } => rhs
                    .iter()
                    .map(|b| pcg(&self.groups[gi], &values, b, tolerance, max_iterations))
                    .collect::<Result<Vec<_>, _>>()?,
            };
            let group = &self.groups[gi];
            for (x, &case) in solutions.into_iter().zip(&group.cases) {
                let mut u = vec![0.0; ndof];
                for (d, m) in group.dof_map.iter().enumerate() {
                    if let Some(k) = m {
                        u[d] = x[*k];
                    }
                }
                displacements[case] = u;
            }
        }
        let compliance_per_case: Vec<f64> = (0..ncases)
            .map(|c| {
                self.loads[c]
                    .iter()
                    .zip(&displacements[c])
                    .map(|(f, u)| f * u)
                    .sum()
            })
            .collect();
        let total_compliance = compliance_per_case
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| c * w)
            .sum();
        Ok(SolveResult {
            displacements,
            compliance_per_case,
            total_compliance,
        })
    }

    fn solve_direct(
        &mut self,
        gi: usize,
        values: &[f64],
        rhs: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, FeaError> {
        let group = &mut self.groups[gi];
        let n = group.n_free;
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &group.col_ptr, None, &group.row_idx);
        if group.symbolic.is_none() {
            let symbolic = SymbolicLlt::try_new(sym, Side::Lower)
                .map_err(|e| FeaError::Factorization(format!("{e:?}")))?;
            group.symbolic = Some(symbolic);
        }
        let mat = SparseColMatRef::new(sym, values);
        let llt =
            Llt::try_new_with_symbolic(group.symbolic.clone().expect("symbolic"), mat, Side::Lower)
                .map_err(|e| FeaError::Singular(format!("Cholesky factorization failed: {e:?}")))?;
        let b = Mat::<f64>::from_fn(n, rhs.len(), |i, j| rhs[j][i]);
        use faer::linalg::solvers::Solve;
        let mut x = llt.solve(&b);
        let group_norm = frobenius_norm(group, values);
        let mut out = Vec::with_capacity(rhs.len());
        for j in 0..rhs.len() {
            let mut xj: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
            let mut res = residual(group, values, &xj, &rhs[j]);
            let bnorm = norm(&rhs[j]);
            let mut rel = if bnorm > 0.0 { norm(&res) / bnorm } else { 0.0 };
            // Iterative refinement recovers accuracy lost to high stiffness contrast.
            for _ in 0..MAX_REFINEMENTS {
                if !(rel > RESIDUAL_TOL) {
                    break;
                }
                let r = Mat::<f64>::from_fn(n, 1, |i, _| res[i]);
                let dx = llt.solve(&r);
                for i in 0..n {
                    xj[i] += dx[(i, 0)];
                    x[(i, j)] = xj[i];
                }
                res = residual(group, values, &xj, &rhs[j]);
                rel = norm(&res) / bnorm;
            }
            // When soft regions move far, the residual of any rounded solution
            // is bounded below by about eps * |K| |u|; judge those solves by
            // their normwise backward error instead.
            let backward = norm(&res) / (group_norm * norm(&xj) + bnorm);
            if !(rel <= RESIDUAL_TOL || backward <= BACKWARD_TOL) {
                return Err(if rel.is_finite() {
                    FeaError::Residual(rel)
                } else {
                    FeaError::Singular("non-finite solution".into())
                });
            }
            out.push(xj);
        }
        Ok(out)
    }

    /// Weighted integrated strain moments `sum_q w_q integral eps_q eps_q^T`
    /// per cell; the compliance gradient with respect to a cell parameter `x`
    /// is `-<dS/dx, moment>`.
    pub fn weighted_strain_moments(&self, result: &SolveResult) -> Vec<Matrix3<f64>> {
        let mut out = vec![Matrix3::zeros(); self.num_cells()];
        for (case, u) in result.displacements.iter().enumerate() {
            let w = self.weights[case];
            if w == 0.0 {
                continue;
            }
            for (cell, acc) in out.iter_mut().enumerate() {
                *acc += strain_moment(&self.element_displacements(u, cell)) * w;
            }
        }
        out
    }

    /// Strain at the centre of a cell.
    pub fn centroid_strain(&self, u: &[f64], cell: usize) -> Vector3<f64> {
        strain_matrix(0.0, 0.0) * self.element_displacements(u, cell)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Frobenius norm of a symmetric matrix stored as its lower triangle.
fn frobenius_norm(group: &ConstraintGroup, values: &[f64]) -> f64 {
    let mut sum = 0.0;
    for c in 0..group.n_free {
        for k in group.col_ptr[c]..group.col_ptr[c + 1] {
            let v = values[k] * values[k];
            sum += if group.row_idx[k] == c { v } else { 2.0 * v };
        }
    }
    sum.sqrt()
}

/// `b - K x` for the symmetric matrix stored as its lower triangle.
fn residual(group: &ConstraintGroup, values: &[f64], x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut r = b.to_vec();
    let kx = sym_matvec(group, values, x);
    for i in 0..r.len() {
        r[i] -= kx[i];
    }
    r
}

fn sym_matvec(group: &ConstraintGroup, values: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for c in 0..group.n_free {
        for k in group.col_ptr[c]..group.col_ptr[c + 1] {
            let r = group.row_idx[k];
            let v = values[k];
            y[r] += v * x[c];
            if r != c {
                y[c] += v * x[r];
            }
        }
    }
    y
}

fn pcg(
    group: &ConstraintGroup,
    values: &[f64],
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, FeaError> {
    let n = group.n_free;
    let mut diag = vec![0.0; n];
    for c in 0..n {
        let k = group.col_ptr[c];
        if group.row_idx[k] == c {
            diag[c] = values[k];
        }
    }
    if diag.iter().any(|&d| !(d > 0.0)) {
        return Err(FeaError::Singular("non-positive diagonal entry".into()));
    }
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for it in 0..max_iter {
        let ap = sym_matvec(group, values, &p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(FeaError::Singular("matrix is not positive definite".into()));
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rel = norm(&r) / bnorm;
        if rel <= tol {
            return Ok(x);
        }
        if it + 1 == max_iter {
            return Err(FeaError::NonConvergence {
                iterations: max_iter,
                residual: rel,
            });
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(FeaError::NonConvergence {
        iterations: max_iter,
        residual: norm(&r) / bnorm,
    })
}

/// Sorted lower-triangular CSC pattern of the reduced stiffness.
fn lower_pattern(
    problem: &ProblemSpec,
    dof_map: &[Option<usize>],
    n_free: usize,
) -> (Vec<usize>, Vec<usize>) {
    // Dofs couple when their nodes share an active cell.
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n_free];
    for cell in (0..problem.num_cells()).filter(|&c| problem.active[c]) {
        let nodes = problem.cell_nodes(cell);
        for a in nodes {
            for b in nodes {
                for ca in 0..2 {
                    let Some(c) = dof_map[2 * a + ca] else {
                        continue;
                    };
                    for cb in 0..2 {
                        let Some(r) = dof_map[2 * b + cb] else {
                            continue;
                        };
                        if r >= c {
                            cols[c].push(r);
                        }
                    }
                }
            }
        }
    }
    let mut col_ptr = Vec::with_capacity(n_free + 1);
    let mut row_idx = Vec::new();
    col_ptr.push(0);
    for mut col in cols {
        col.sort_unstable();
        col.dedup();
        row_idx.extend(col);
        col_ptr.push(row_idx.len());
    }
    (col_ptr, row_idx)
}

/// Rejects supports that leave a rigid-body mode unconstrained.
fn check_rigid_modes(problem: &ProblemSpec, fix: &[Fixation]) -> Result<(), FeaError> {
    // Rows of the rigid-mode matrix restricted to fixed dofs:
    // translations (1,0), (0,1) and rotation (-y, x).
    let mut rows = Vec::new();
    for f in fix {
        let (i, j) = problem.node_coords(f.node);
        let (x, y) = (i as f64, j as f64);
        if f.x {
            rows.push(Vector3::new(1.0, 0.0, -y));
        }
        if f.y {
            rows.push(Vector3::new(0.0, 1.0, x));
        }
    }
    let mut gram = Matrix3::zeros();
    for r in &rows {
        gram += r * r.transpose();
    }
    let eig = gram.symmetric_eigenvalues();
    let max = eig.max();
    if rows.is_empty() || eig.min() <= 1e-10 * max.max(1.0) {
        return Err(FeaError::Singular(format!(
            "{} constrained dofs do not remove all rigid-body modes",
            rows.len()
        )));
    }
    Ok(())
}

/// Builds the model and solves once.
pub fn assemble_and_solve(
    problem: &ProblemSpec,
    cells: &[ElasticityMatrix],
) -> Result<SolveResult, FeaError> {
    FeModel::new(problem)?.solve(cells)
}

/// Per-cell matrices with `inside` on active cells and the void phase elsewhere.
pub fn masked_field(
    problem: &ProblemSpec,
    inside: impl Fn(usize) -> ElasticityMatrix,
) -> Vec<ElasticityMatrix> {
    let void = problem.material.void();
    (0..problem.num_cells())
        .map(|c| if problem.active[c] { inside(c) } else { void })
        .collect()
}

/// Restricts a fine problem to its simulation grid.
///
/// Loads are transferred with the transpose of bilinear interpolation; a
/// coarse node is fixed if any fine node in the support of its hat function
/// is fixed. A coarse cell is active when at least half of its fine cells are,
/// or when it is needed to attach a restricted load or support.
pub fn restrict_problem(fine: &ProblemSpec) -> Result<ProblemSpec, FeaError> {
    fine.validate()?;
    let f = fine.coarsening;
    let (cnx, cny) = (fine.nx / f, fine.ny / f);
    let mut active = vec![false; cnx * cny];
    let mut fine_count = vec![0usize; cnx * cny];
    for cj in 0..cny {
        for ci in 0..cnx {
            let mut count = 0;
            for j in cj * f..(cj + 1) * f {
                for i in ci * f..(ci + 1) * f {
                    count += fine.active[fine.cell(i, j)] as usize;
                }
            }
            fine_count[cj * cnx + ci] = count;
            active[cj * cnx + ci] = 2 * count >= f * f;
        }
    }
    let coarse_node = |ci: usize, cj: usize| cj * (cnx + 1) + ci;
    // Coarse nodes whose hat support contains a fine node, with weights.
    let stencil = |node: usize| -> Vec<(usize, f64)> {
        let (i, j) = fine.node_coords(node);
        let (ci, ri) = (i / f, i % f);
        let (cj, rj) = (j / f, j % f);
        let tx = ri as f64 / f as f64;
        let ty = rj as f64 / f as f64;
        let mut out = Vec::with_capacity(4);
        for (di, wx) in [(0, 1.0 - tx), (1, tx)] {
            for (dj, wy) in [(0, 1.0 - ty), (1, ty)] {
                let w = wx * wy;
                if w > 0.0 {
                    out.push((coarse_node(ci + di, cj + dj), w));
                }
            }
        }
        out
    };
    let restrict_fix = |fix: &[Fixation]| -> Vec<Fixation> {
        let mut map: BTreeMap<usize, (bool, bool)> = BTreeMap::new();
        for fx in fix {
            for (cn, _) in stencil(fx.node) {
                let e = map.entry(cn).or_insert((false, false));
                e.0 |= fx.x;
                e.1 |= fx.y;
            }
        }
        map.into_iter()
            .map(|(node, (x, y))| Fixation { node, x, y })
            .collect()
    };
    let load_cases = fine
        .load_cases
        .iter()
        .map(|case| {
            let mut acc: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
            for l in &case.loads {
                for (cn, w) in stencil(l.node) {
                    let e = acc.entry(cn).or_insert([0.0, 0.0]);
                    e[0] += w * l.force[0];
                    e[1] += w * l.force[1];
                }
            }
            LoadCase {
                loads: acc
                    .into_iter()
                    .map(|(node, force)| PointLoad { node, force })
                    .collect(),
                fixations: case.fixations.as_deref().map(restrict_fix),
            }
        })
        .collect();
    let mut fixations = restrict_fix(&fine.fixations);
    let mut load_cases: Vec<LoadCase> = load_cases;
    // Supports and loads must stay attached: activate the best-filled coarse
    // cell next to any node the majority rule left without an active cell.
    let attached = |node: usize, active: &mut Vec<bool>| {
        let (ci, cj) = (node % (cnx + 1), node / (cnx + 1));
        let mut best: Option<(usize, usize)> = None;
        for (di, dj) in [(0usize, 0usize), (1, 0), (0, 1), (1, 1)] {
            if ci < di || cj < dj || ci - di >= cnx || cj - dj >= cny {
                continue;
            }
            let cell = (cj - dj) * cnx + (ci - di);
            if active[cell] {
                return;
            }
            let count = fine_count[cell];
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((cell, count));
            }
        }
        if let Some((cell, _)) = best {
            active[cell] = true;
        }
    };
    let mut nodes: Vec<usize> = fixations.iter().map(|f| f.node).collect();
    for case in &load_cases {
        nodes.extend(case.loads.iter().map(|l| l.node));
        nodes.extend(case.fixations.iter().flatten().map(|f| f.node));
    }
    for node in nodes {
        attached(node, &mut active);
    }
    fixations.sort();
    for case in &mut load_cases {
        if let Some(f) = case.fixations.as_mut() {
            f.sort();
        }
    }
    let coarse = ProblemSpec {
        name: fine.name.clone(),
        nx: cnx,
        ny: cny,
        coarsening: 1,
        active,
        fixations,
        load_cases,
        weights: fine.weights.clone(),
        volume_fraction: fine.volume_fraction,
        width_bounds: fine.width_bounds,
        material: fine.material,
    };
    // Loads or supports may land on nodes that lost their active cells.
    coarse.validate()?;
    Ok(coarse)
}

/// Principal stresses of one cell for one load case: `(value, angle)` pairs,
/// angles in `[0, pi)`.
pub type PrincipalPair = [(f64, f64); 2];

/// Principal stresses of the fully solid design and the dominant direction.
#[derive(Debug, Clone)]
pub struct StressSample {
    /// `per_case[case][cell]`.
    pub per_case: Vec<Vec<PrincipalPair>>,
    /// Direction of the largest absolute principal stress over all cases.
    pub dominant_direction: Vec<f64>,
}

impl StressSample {
    /// Initial base-layer orientation, perpendicular to the dominant stress.
    pub fn initial_theta3(&self) -> Vec<f64> {
        self.dominant_direction
            .iter()
            .map(|t| t + std::f64::consts::FRAC_PI_2)
            .collect()
    }
}

/// Principal values and directions of a plane stress `(sxx, syy, sxy)`.
pub fn principal_stresses(s: &Vector3<f64>) -> PrincipalPair {
    use std::f64::consts::{FRAC_PI_2, PI};
    let (sx, sy, txy) = (s[0], s[1], s[2]);
    let mean = 0.5 * (sx + sy);
    let radius = (0.25 * (sx - sy) * (sx - sy) + txy * txy).sqrt();
    let angle = 0.5 * (2.0 * txy).atan2(sx - sy);
    let wrap = |a: f64| {
        let r = a.rem_euclid(PI);
        if r >= PI {
            0.0
        } else {
            r
        }
    };
    [
        (mean + radius, wrap(angle)),
        (mean - radius, wrap(angle + FRAC_PI_2)),
    ]
}

/// Picks the candidate with the largest magnitude; near-ties go to the larger
/// algebraic value, then to the smaller angle.
pub fn dominant_principal(candidates: &[(f64, f64)]) -> (f64, f64) {
    let scale = candidates.iter().fold(0.0f64, |m, c| m.max(c.0.abs()));
    let tie = 1e-9 * scale.max(f64::MIN_POSITIVE);
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        let (ab, ac) = (best.0.abs(), c.0.abs());
        let better = if (ac - ab).abs() > tie {
            ac > ab
        } else if (c.0 - best.0).abs() > tie {
            c.0 > best.0
        } else {
            c.1 < best.1
        };
        if better {
            best = c;
        }
    }
    best
}

/// Solves the fully solid domain and samples centroid principal stresses.
pub fn principal_stress_init(problem: &ProblemSpec) -> Result<StressSample, FeaError> {
    let solid = problem.material.solid();
    let cells = masked_field(problem, |_| solid);
    let mut model = FeModel::new(problem)?;
    let result = model.solve(&cells)?;
    let mut per_case = Vec::with_capacity(problem.load_cases.len());
    for u in &result.displacements {
        let pairs = (0..problem.num_cells())
            .map(|cell| principal_stresses(&(cells[cell].0 * model.centroid_strain(u, cell))))
            .collect::<Vec<_>>();
        per_case.push(pairs);
    }
    let dominant_direction = (0..problem.num_cells())
        .map(|cell| {
            let cands: Vec<(f64, f64)> = per_case
                .iter()
                .flat_map(|pc: &Vec<PrincipalPair>| pc[cell])
                .collect();
            dominant_principal(&cands).1
        })
        .collect();
    Ok(StressSample {
        per_case,
        dominant_direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    pub(crate) fn bar(nx: usize, ny: usize, load: f64) -> ProblemSpec {
        let mut p = ProblemSpec {
            name: "bar".into(),
            nx,
            ny,
            coarsening: 1,
            active: vec![true; nx * ny],
            fixations: Vec::new(),
            load_cases: Vec::new(),
            weights: vec![1.0],
            volume_fraction: 0.5,
            width_bounds: (0.1, 0.5),
            material: MaterialConstants::default(),
        };
        // Left edge: x fixed everywhere, y fixed at the bottom node only.
        for j in 0..=ny {
            p.fixations.push(Fixation {
                node: p.node(0, j),
                x: true,
                y: j == 0,
            });
        }
        // Consistent nodal loads of a uniform traction on the right edge.
        let mut loads = Vec::new();
        for j in 0..=ny {
            let share = if j == 0 || j == ny { 0.5 } else { 1.0 } / ny as f64;
            loads.push(PointLoad {
                node: p.node(nx, j),
                force: [load * share, 0.0],
            });
        }
        p.load_cases.push(LoadCase {
            loads,
            fixations: None,
        });
        p
    }

    /// Closed-form unit-square bilinear stiffness, nodes counter-clockwise
    /// from the lower-left corner.
    fn closed_form_q4(e: f64, nu: f64) -> ElementMatrix {
        let k = [
            0.5 - nu / 6.0,
            0.125 + nu / 8.0,
            -0.25 - nu / 12.0,
            -0.125 + 3.0 * nu / 8.0,
            -0.25 + nu / 12.0,
            -0.125 - nu / 8.0,
            nu / 6.0,
            0.125 - 3.0 * nu / 8.0,
        ];
        let idx = [
            [0, 1, 2, 3, 4, 5, 6, 7],
            [1, 0, 7, 6, 5, 4, 3, 2],
            [2, 7, 0, 5, 6, 3, 4, 1],
            [3, 6, 5, 0, 7, 2, 1, 4],
            [4, 5, 6, 7, 0, 1, 2, 3],
            [5, 4, 3, 2, 1, 0, 7, 6],
            [6, 3, 4, 1, 2, 7, 0, 5],
            [7, 2, 1, 4, 3, 6, 5, 0],
        ];
        ElementMatrix::from_fn(|r, c| e / (1.0 - nu * nu) * k[idx[r][c]])
    }

    #[test]
    fn element_stiffness_matches_closed_form() {
        let ke = element_stiffness(&ElasticityMatrix::isotropic(1.0, 0.3));
        let expect = closed_form_q4(1.0, 0.3);
        assert!((ke - expect).amax() < 1e-14);
    }

    #[test]
    fn element_stiffness_is_linear_and_has_three_rigid_modes() {
        let s = ElasticityMatrix::isotropic(1.0, 0.3);
        let ke = element_stiffness(&s);
        let ke3 = element_stiffness(&s.scaled(3.0));
        assert!((ke3 - ke * 3.0).amax() < 1e-14);
        assert_eq!(
            element_stiffness(&ElasticityMatrix::zero()),
            ElementMatrix::zeros()
        );
        let eig = ke.symmetric_eigenvalues();
        let zeros = eig.iter().filter(|v| v.abs() < 1e-12).count();
        assert_eq!(zeros, 3);
        assert!(eig.iter().all(|&v| v > -1e-12));
    }

    #[test]
    fn uniaxial_bar_tip_displacement() {
        let (nx, ny, load) = (20, 4, 2.0);
        let p = bar(nx, ny, load);
        let solid = p.material.solid();
        let r = assemble_and_solve(&p, &masked_field(&p, |_| solid)).unwrap();
        // Plane stress bar: tip displacement P L / (E A).
        let expect = load * nx as f64 / (1.0 * ny as f64);
        let tip = r.displacements[0][2 * p.node(nx, ny / 2)];
        assert_relative_eq!(tip, expect, max_relative = 0.01);
        assert!(r.total_compliance > 0.0);
    }

    #[test]
    fn compliance_is_quadratic_in_load() {
        let p1 = bar(6, 3, 1.0);
        let p2 = bar(6, 3, 2.0);
        let solid = p1.material.solid();
        let c1 = assemble_and_solve(&p1, &masked_field(&p1, |_| solid))
            .unwrap()
            .total_compliance;
        let c2 = assemble_and_solve(&p2, &masked_field(&p2, |_| solid))
            .unwrap()
            .total_compliance;
        assert_relative_eq!(c2, 4.0 * c1, max_relative = 1e-10);
    }

    #[test]
    fn residual_is_small() {
        let p = bar(8, 5, 1.0);
        let mut model = FeModel::new(&p).unwrap();
        let cells: Vec<_> = (0..p.num_cells())
            .map(|c| ElasticityMatrix::isotropic(if c % 3 == 0 { 1e-6 } else { 1.0 }, 0.3))
            .collect();
        let r = model.solve(&cells).unwrap();
        // Recompute K u with dense element loops.
        let mut ku = vec![0.0; 2 * p.num_nodes()];
        for (cell, s) in cells.iter().enumerate() {
            let ke = element_stiffness(s);
            let ue = model.element_displacements(&r.displacements[0], cell);
            let fe = ke * ue;
            let d = model.cell_dofs(cell);
            for a in 0..8 {
                ku[d[a]] += fe[a];
            }
        }
        let mut f = vec![0.0; ku.len()];
        for l in &p.load_cases[0].loads {
            f[2 * l.node] += l.force[0];
        }
        let fixed: std::collections::HashSet<usize> = p
            .fixations
            .iter()
            .flat_map(|fx| {
                let mut v = vec![];
                if fx.x {
                    v.push(2 * fx.node)
                }
                if fx.y {
                    v.push(2 * fx.node + 1)
                }
                v
            })
            .collect();
        let res: f64 = (0..ku.len())
            .filter(|d| !fixed.contains(d))
            .map(|d| (ku[d] - f[d]).powi(2))
            .sum::<f64>()
            .sqrt();
        let fnorm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res / fnorm < 1e-8);
    }

    #[test]
    fn pcg_agrees_with_direct() {
        let p = bar(10, 4, 1.0);
        let solid = p.material.solid();
        let cells = masked_field(&p, |_| solid);
        let direct = FeModel::new(&p).unwrap().solve(&cells).unwrap();
        let iterative = FeModel::with_solver(
            &p,
            SolverKind::Pcg {
                tolerance: 1e-12,
                max_iterations: 10_000,
            },
        )
        .unwrap()
        .solve(&cells)
        .unwrap();
        assert_relative_eq!(
            direct.total_compliance,
            iterative.total_compliance,
            max_relative = 1e-9
        );
        let capped = FeModel::with_solver(
            &p,
            SolverKind::Pcg {
                tolerance: 1e-12,
                max_iterations: 3,
            },
        )
        .unwrap()
        .solve(&cells);
        assert!(matches!(capped, Err(FeaError::NonConvergence { .. })));
    }

    #[test]
    fn missing_supports_are_singular() {
        let mut p = bar(4, 2, 1.0);
        p.fixations = vec![Fixation {
            node: 0,
            x: true,
            y: true,
        }];
        assert!(matches!(FeModel::new(&p), Err(FeaError::Singular(_))));
        // Two x-fixed nodes on a vertical line plus one y-fixed node is enough.
        p.fixations = vec![
            Fixation {
                node: 0,
                x: true,
                y: true,
            },
            Fixation {
                node: p.node(0, 2),
                x: true,
                y: false,
            },
        ];
        assert!(FeModel::new(&p).is_ok());
    }

    #[test]
    fn restriction_conserves_force_and_keeps_coincident_loads() {
        let mut fine = bar(8, 4, 1.0);
        fine.coarsening = 2;
        let (a, b) = (fine.node(4, 2), fine.node(5, 3));
        fine.load_cases[0].loads.push(PointLoad {
            node: a,
            force: [0.3, -0.7],
        });
        fine.load_cases[0].loads.push(PointLoad {
            node: b,
            force: [0.1, 0.2],
        });
        let coarse = restrict_problem(&fine).unwrap();
        assert_eq!((coarse.nx, coarse.ny), (4, 2));
        let rf = fine.load_resultant(0);
        let rc = coarse.load_resultant(0);
        assert!((rf[0] - rc[0]).abs() < 1e-12 && (rf[1] - rc[1]).abs() < 1e-12);
        // A single load at a coincident node maps to itself.
        let mut single = bar(8, 4, 1.0);
        single.coarsening = 2;
        let n = single.node(4, 2);
        single.load_cases[0].loads = vec![PointLoad {
            node: n,
            force: [0.3, -0.7],
        }];
        let c = restrict_problem(&single).unwrap();
        assert_eq!(
            c.load_cases[0].loads,
            vec![PointLoad {
                node: c.node(2, 1),
                force: [0.3, -0.7]
            }]
        );
        // Left edge stays fixed in x.
        assert!(coarse
            .fixations
            .iter()
            .any(|f| f.node == coarse.node(0, 1) && f.x));
    }

    #[test]
    fn principal_stress_of_uniaxial_tension() {
        let s = principal_stresses(&Vector3::new(2.0, 0.0, 0.0));
        assert_relative_eq!(s[0].0, 2.0);
        assert_relative_eq!(s[0].1, 0.0);
        assert_relative_eq!(s[1].1, PI / 2.0);
    }

    #[test]
    fn pure_shear_tie_prefers_tension() {
        let s = principal_stresses(&Vector3::new(0.0, 0.0, 1.0));
        let (v, a) = dominant_principal(&s);
        assert_relative_eq!(v, 1.0);
        assert_relative_eq!(a, PI / 4.0, epsilon = 1e-12);
        let s = principal_stresses(&Vector3::new(0.0, 0.0, -1.0));
        let (v, a) = dominant_principal(&s);
        assert_relative_eq!(v, 1.0);
        assert_relative_eq!(a, 3.0 * PI / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn stress_init_under_uniaxial_tension() {
        let p = bar(12, 4, 1.0);
        let sample = principal_stress_init(&p).unwrap();
        for &t in &sample.dominant_direction {
            let d = t.min(PI - t);
            assert!(d < 1e-6, "direction {t}");
        }
        for t in sample.initial_theta3() {
            let d = (t - PI / 2.0).rem_euclid(PI);
            assert!(d.min(PI - d) < 1e-6, "theta3 {t}");
        }
    }
}

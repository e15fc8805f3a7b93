//! Homogenization-based optimization of rank-3 layer widths and orientations.
//!
//! Widths are updated by optimality criteria, orientations by the method of
//! moving asymptotes. Both act on raw design variables; the simulation sees
//! the cone-filtered (physical) fields.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fea::{principal_stress_init, FeModel, FeaError, ProblemSpec, SolverKind};
use crate::rank3::{
    elasticity_with_gradient_free, equilateral_normals, volume_fraction, volume_fraction_gradient,
    ElasticityMatrix, LaminateSpec, Rank3Error, THETA_BOUND,
};

/// Per-iteration move limit of the layer widths.
pub const WIDTH_MOVE: f64 = 0.01;
/// Per-iteration move limit of the orientations.
pub const ANGLE_MOVE: f64 = PI / 180.0;
/// Harmonic order of the orientation penalty.
pub const PENALTY_ORDER: f64 = 6.0;

const OC_DAMPING: f64 = 0.5;
const LAMBDA_RANGE: (f64, f64) = (1e-9, 1e9);
const MIN_COMPLIANCE_SLOPE: f64 = -1e-12;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Fea(#[from] FeaError),
    #[error(transparent)]
    Material(#[from] Rank3Error),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("volume multiplier not bracketed: mean density {volume:.6} exceeds budget {budget:.6} even at the largest multiplier")]
    NonBracketing { volume: f64, budget: f64 },
    #[error("non-finite value at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error("regularization reference is zero; the initial orientation field is already regular, use weight W = 1")]
    ZeroRegularizationReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// All base-layer normals at pi/2.
    Uniform,
    /// Base-layer normal perpendicular to the dominant principal stress.
    Stress,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub init: InitMode,
    /// Weight of compliance against orientation regularity, in (0, 1].
    pub weight: f64,
    pub max_iter: usize,
    pub filter_radius: f64,
    /// Optimize the three layer orientations independently.
    pub free_orientations: bool,
    pub solver: SolverKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            init: InitMode::Stress,
            weight: 0.5,
            max_iter: 300,
            filter_radius: 2.0,
            free_orientations: false,
            solver: SolverKind::Direct,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return Err(OptimizerError::InvalidConfig(format!(
                "weight {} must lie in (0, 1]",
                self.weight
            )));
        }
        if !(self.filter_radius >= 0.0 && self.filter_radius.is_finite()) {
            return Err(OptimizerError::InvalidConfig(format!(
                "filter radius {} is invalid",
                self.filter_radius
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub compliance: f64,
    pub regularization: f64,
    pub objective: f64,
    /// Mean physical density after the width update of this iteration.
    pub volume: f64,
    /// Largest raw width change of this iteration.
    pub width_move: f64,
    /// Largest raw orientation change of this iteration.
    pub angle_move: f64,
}

/// Per-cell rank-3 specification on the simulation grid. Inactive cells carry
/// values but are simulated as void.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignField {
    pub nx: usize,
    pub ny: usize,
    pub active: Vec<bool>,
    pub alpha: Vec<[f64; 3]>,
    /// Layer normal angles `(theta1, theta2, theta3)`.
    pub angles: Vec<[f64; 3]>,
    pub free_orientations: bool,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
}

impl DesignField {
    /// Equilateral field with uniform widths and given base orientations.
    pub fn equilateral(
        nx: usize,
        ny: usize,
        active: Vec<bool>,
        width: f64,
        theta3: &[f64],
    ) -> Self {
        Self {
            nx,
            ny,
            active,
            alpha: vec![[width; 3]; nx * ny],
            angles: theta3.iter().map(|&t| equilateral_normals(t)).collect(),
            free_orientations: false,
            iteration: 0,
            history: Vec::new(),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn theta3(&self, cell: usize) -> f64 {
        self.angles[cell][2]
    }

    pub fn spec(&self, cell: usize) -> Result<LaminateSpec, Rank3Error> {
        LaminateSpec::new(self.alpha[cell], self.theta3(cell))
    }

    pub fn density(&self, cell: usize) -> f64 {
        volume_fraction(&self.alpha[cell])
    }

    /// Mean density over active cells.
    pub fn mean_density(&self) -> f64 {
        mean_density(&self.active, &self.alpha)
    }

    /// Widths and normal angles at `(x, y)` in cell units, interpolated
    /// bilinearly between the centers of active cells. `None` outside the mask.
    pub fn interpolate(&self, x: f64, y: f64) -> Option<([f64; 3], [f64; 3])> {
        let (nx, ny) = (self.nx, self.ny);
        if x < 0.0 || y < 0.0 || x >= nx as f64 || y >= ny as f64 {
            return None;
        }
        let home = (y as usize) * nx + x as usize;
        if !self.active[home] {
            return None;
        }
        let (u, v) = (x - 0.5, y - 0.5);
        let i0 = (u.floor().max(0.0) as usize).min(nx - 1);
        let j0 = (v.floor().max(0.0) as usize).min(ny - 1);
        let (i1, j1) = ((i0 + 1).min(nx - 1), (j0 + 1).min(ny - 1));
        let fx = (u - i0 as f64).clamp(0.0, 1.0);
        let fy = (v - j0 as f64).clamp(0.0, 1.0);
        let corners = [
            (j0 * nx + i0, (1.0 - fx) * (1.0 - fy)),
            (j0 * nx + i1, fx * (1.0 - fy)),
            (j1 * nx + i0, (1.0 - fx) * fy),
            (j1 * nx + i1, fx * fy),
        ];
        let (mut alpha, mut angles, mut total) = ([0.0; 3], [0.0; 3], 0.0);
        for (c, w) in corners {
            if self.active[c] && w > 0.0 {
                for n in 0..3 {
                    alpha[n] += w * self.alpha[c][n];
                    angles[n] += w * self.angles[c][n];
                }
                total += w;
            }
        }
        if total <= 0.0 {
            return Some((self.alpha[home], self.angles[home]));
        }
        Some((alpha.map(|a| a / total), angles.map(|a| a / total)))
    }

    /// Constitutive matrices of all cells, void outside the mask.
    pub fn elasticity_field(
        &self,
        problem: &ProblemSpec,
    ) -> Result<Vec<ElasticityMatrix>, Rank3Error> {
        let void = problem.material.void();
        (0..self.num_cells())
            .map(|c| {
                if self.active[c] {
                    crate::rank3::elasticity_matrix_free(
                        &self.alpha[c],
                        &self.angles[c],
                        &problem.material,
                    )
                } else {
                    Ok(void)
                }
            })
            .collect()
    }
}

fn mean_density(active: &[bool], alpha: &[[f64; 3]]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, &on) in alpha.iter().zip(active) {
        if on {
            sum += volume_fraction(a);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Normalized cone filter over active cells.
#[derive(Debug, Clone)]
pub struct ConeFilter {
    rows: Vec<Vec<(usize, f64)>>,
}

impl ConeFilter {
    pub fn new(nx: usize, ny: usize, active: &[bool], radius: f64) -> Self {
        let reach = if radius < 1.0 {
            0
        } else {
            radius.ceil() as i64
        };
        let mut rows = Vec::with_capacity(nx * ny);
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                let c = (j as usize) * nx + i as usize;
                if !active[c] {
                    rows.push(vec![(c, 1.0)]);
                    continue;
                }
                let mut row = Vec::new();
                for dj in -reach..=reach {
                    for di in -reach..=reach {
                        let (ii, jj) = (i + di, j + dj);
                        if ii < 0 || jj < 0 || ii >= nx as i64 || jj >= ny as i64 {
                            continue;
                        }
                        let other = jj as usize * nx + ii as usize;
                        if !active[other] {
                            continue;
                        }
                        let w = if reach == 0 {
                            1.0
                        } else {
                            radius - ((di * di + dj * dj) as f64).sqrt()
                        };
                        if w > 0.0 {
                            row.push((other, w));
                        }
                    }
                }
                let total: f64 = row.iter().map(|e| e.1).sum();
                for e in &mut row {
                    e.1 /= total;
                }
                rows.push(row);
            }
        }
        Self { rows }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }

    /// Chain rule: gradient with respect to raw values from the gradient with
    /// respect to filtered values.
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[j] += w * g[i];
            }
        }
        out
    }

    pub fn apply3(&self, x: &[[f64; 3]]) -> Vec<[f64; 3]> {
        self.rows
            .iter()
            .map(|row| {
                let mut acc = [0.0; 3];
                for &(j, w) in row {
                    for k in 0..3 {
                        acc[k] += w * x[j][k];
                    }
                }
                acc
            })
            .collect()
    }

    pub fn apply_transpose3(&self, g: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; g.len()];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                for k in 0..3 {
                    out[j][k] += w * g[i][k];
                }
            }
        }
        out
    }
}

/// Filters widths and orientations of a raw design.
pub fn filter_fields(design: &DesignField, radius: f64) -> DesignField {
    let filter = ConeFilter::new(design.nx, design.ny, &design.active, radius);
    physical_design(design, &filter)
}

fn physical_design(raw: &DesignField, filter: &ConeFilter) -> DesignField {
    let alpha = filter.apply3(&raw.alpha);
    let angles = if raw.free_orientations {
        filter.apply3(&raw.angles)
    } else {
        let t3: Vec<f64> = raw.angles.iter().map(|a| a[2]).collect();
        filter
            .apply(&t3)
            .into_iter()
            .map(equilateral_normals)
            .collect()
    };
    DesignField {
        alpha,
        angles,
        ..raw.clone()
    }
}

/// Orientation penalty between edge-adjacent active cells.
#[derive(Debug, Clone)]
pub struct RegularizationReport {
    /// Sum over ordered adjacent pairs.
    pub total: f64,
    /// Per unordered edge `(cell_i, cell_j, penalty)`, `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
    /// Derivative of `total` with respect to each cell's base orientation.
    pub gradient: Vec<f64>,
}

/// Penalty of one edge, zero when the difference is a multiple of pi/3.
pub fn edge_penalty(delta: f64) -> f64 {
    0.5 - 0.5 * (PENALTY_ORDER * delta).cos()
}

pub fn regularization(
    nx: usize,
    ny: usize,
    active: &[bool],
    theta3: &[f64],
) -> RegularizationReport {
    let mut edges = Vec::new();
    let mut gradient = vec![0.0; nx * ny];
    let mut total = 0.0;
    let mut visit = |a: usize, b: usize| {
        if !(active[a] && active[b]) {
            return;
        }
        let d = theta3[a] - theta3[b];
        let p = edge_penalty(d);
        edges.push((a, b, p));
        total += 2.0 * p;
        // Both orderings contribute 0.5 * h0 * sin(h0 * d) each.
        let g = PENALTY_ORDER * (PENALTY_ORDER * d).sin();
        gradient[a] += g;
        gradient[b] -= g;
    };
    for j in 0..ny {
        for i in 0..nx {
            let c = j * nx + i;
            if i + 1 < nx {
                visit(c, c + 1);
            }
            if j + 1 < ny {
                visit(c, c + nx);
            }
        }
    }
    RegularizationReport {
        total,
        edges,
        gradient,
    }
}

/// Weighted objective normalized by the initial compliance and penalty.
pub fn objective(
    c: f64,
    p: f64,
    c_star: f64,
    p_star: f64,
    weight: f64,
) -> Result<f64, OptimizerError> {
    if weight >= 1.0 {
        return Ok(c / c_star);
    }
    if p_star <= 0.0 {
        return Err(OptimizerError::ZeroRegularizationReference);
    }
    Ok(weight * c / c_star + (1.0 - weight) * p / p_star)
}

/// Compliance, penalty and their derivatives with respect to the physical
/// design variables.
#[derive(Debug, Clone)]
pub struct DesignEvaluation {
    pub compliance: f64,
    pub compliance_per_case: Vec<f64>,
    pub regularization: f64,
    pub d_alpha: Vec<[f64; 3]>,
    /// Derivatives with respect to the three layer normal angles.
    pub d_angle: Vec<[f64; 3]>,
    pub d_regularization: Vec<f64>,
}

impl DesignEvaluation {
    pub fn d_theta3(&self) -> Vec<f64> {
        self.d_angle.iter().map(|d| d[0] + d[1] + d[2]).collect()
    }
}

fn contract(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.component_mul(b).sum()
}

pub fn evaluate_design(
    model: &mut FeModel,
    problem: &ProblemSpec,
    design: &DesignField,
) -> Result<DesignEvaluation, OptimizerError> {
    let n = design.num_cells();
    let void = problem.material.void();
    let mut cells = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for c in 0..n {
        if design.active[c] {
            let (s, g) = elasticity_with_gradient_free(
                &design.alpha[c],
                &design.angles[c],
                &problem.material,
            )?;
            cells.push(s);
            grads.push(Some(g));
        } else {
            cells.push(void);
            grads.push(None);
        }
    }
    let result = model.solve(&cells)?;
    let moments = model.weighted_strain_moments(&result);
    let mut d_alpha = vec![[0.0; 3]; n];
    let mut d_angle = vec![[0.0; 3]; n];
    for c in 0..n {
        if let Some(g) = &grads[c] {
            for k in 0..3 {
                d_alpha[c][k] = -contract(&g.d_alpha[k], &moments[c]);
                d_angle[c][k] = -contract(&g.d_angle[k], &moments[c]);
            }
        }
    }
    let t3: Vec<f64> = design.angles.iter().map(|a| a[2]).collect();
    let reg = regularization(design.nx, design.ny, &design.active, &t3);
    Ok(DesignEvaluation {
        compliance: result.total_compliance,
        compliance_per_case: result.compliance_per_case,
        regularization: reg.total,
        d_alpha,
        d_angle,
        d_regularization: reg.gradient,
    })
}

/// Outcome of one width update.
#[derive(Debug, Clone)]
pub struct OcStep {
    pub alpha: Vec<[f64; 3]>,
    pub multiplier: f64,
    /// Mean physical density of the updated widths.
    pub volume: f64,
}

/// Optimality-criteria update of raw widths. `d_obj` is the objective
/// gradient with respect to the raw widths; the volume constraint is imposed
/// on the filtered widths.
pub fn oc_update_widths(
    alpha: &[[f64; 3]],
    d_obj: &[[f64; 3]],
    active: &[bool],
    filter: &ConeFilter,
    budget: f64,
    bounds: (f64, f64),
    move_limit: f64,
) -> Result<OcStep, OptimizerError> {
    let n_active = active.iter().filter(|&&a| a).count().max(1) as f64;
    let phys = filter.apply3(alpha);
    let d_vol_phys: Vec<[f64; 3]> = phys
        .iter()
        .zip(active)
        .map(|(a, &on)| {
            if on {
                volume_fraction_gradient(a).map(|g| g / n_active)
            } else {
                [0.0; 3]
            }
        })
        .collect();
    let d_vol = filter.apply_transpose3(&d_vol_phys);
    let (lo, hi) = bounds;
    let update = |lambda: f64| -> Vec<[f64; 3]> {
        alpha
            .iter()
            .enumerate()
            .map(|(c, a)| {
                if !active[c] {
                    return *a;
                }
                let mut out = *a;
                for k in 0..3 {
                    let slope = d_obj[c][k].min(MIN_COMPLIANCE_SLOPE);
                    let dv = d_vol[c][k].max(f64::MIN_POSITIVE);
                    let trial = a[k] * (-slope / (lambda * dv)).powf(OC_DAMPING);
                    let lower = lo.max(a[k] - move_limit);
                    let upper = hi.min(a[k] + move_limit);
                    out[k] = limit_move(a[k], trial.clamp(lower, upper), move_limit);
                }
                out
            })
            .collect()
    };
    let volume_of = |x: &[[f64; 3]]| mean_density(active, &filter.apply3(x));

    let (mut l1, mut l2) = LAMBDA_RANGE;
    let at_min = update(l1);
    let v_min = volume_of(&at_min);
    if v_min <= budget {
        return Ok(OcStep {
            alpha: at_min,
            multiplier: l1,
            volume: v_min,
        });
    }
    let mut best = update(l2);
    let mut v_best = volume_of(&best);
    if v_best > budget {
        return Err(OptimizerError::NonBracketing {
            volume: v_best,
            budget,
        });
    }
    // Bisection in log space; l2 always stays feasible.
    for _ in 0..200 {
        if (l2 / l1).ln() < 1e-12 {
            break;
        }
        let mid = (l1 * l2).sqrt();
        let x = update(mid);
        let v = volume_of(&x);
        if v > budget {
            l1 = mid;
        } else {
            l2 = mid;
            best = x;
            v_best = v;
        }
    }
    Ok(OcStep {
        alpha: best,
        multiplier: l2,
        volume: v_best,
    })
}

/// Moving-asymptote state for a block of independent, unconstrained variables.
#[derive(Debug, Clone)]
pub struct MmaState {
    low: Vec<f64>,
    upp: Vec<f64>,
    xold1: Vec<f64>,
    xold2: Vec<f64>,
    iteration: usize,
    pub xmin: f64,
    pub xmax: f64,
    pub move_limit: f64,
}

const ASYMPTOTE_INIT: f64 = 0.5;
const ASYMPTOTE_INCREASE: f64 = 1.2;
const ASYMPTOTE_DECREASE: f64 = 0.7;
const RAA0: f64 = 1e-5;

impl MmaState {
    pub fn new(n: usize, xmin: f64, xmax: f64, move_limit: f64) -> Self {
        Self {
            low: vec![0.0; n],
            upp: vec![0.0; n],
            xold1: Vec::new(),
            xold2: Vec::new(),
            iteration: 0,
            xmin,
            xmax,
            move_limit,
        }
    }

    /// One step on `x` given the objective gradient. Variables with `frozen`
    /// set stay put.
    pub fn update(&mut self, x: &mut [f64], grad: &[f64], frozen: &[bool]) {
        self.iteration += 1;
        let range = self.xmax - self.xmin;
        for i in 0..x.len() {
            let xi = x[i];
            if self.iteration <= 2 {
                self.low[i] = xi - ASYMPTOTE_INIT * range;
                self.upp[i] = xi + ASYMPTOTE_INIT * range;
            } else {
                let trend = (xi - self.xold1[i]) * (self.xold1[i] - self.xold2[i]);
                let gamma = if trend < 0.0 {
                    ASYMPTOTE_DECREASE
                } else if trend > 0.0 {
                    ASYMPTOTE_INCREASE
                } else {
                    1.0
                };
                self.low[i] = xi - gamma * (self.xold1[i] - self.low[i]);
                self.upp[i] = xi + gamma * (self.upp[i] - self.xold1[i]);
                self.low[i] = self.low[i].clamp(xi - 10.0 * range, xi - 0.01 * range);
                self.upp[i] = self.upp[i].clamp(xi + 0.01 * range, xi + 10.0 * range);
            }
        }
        let previous = x.to_vec();
        self.xold2 = std::mem::replace(&mut self.xold1, previous);
        if self.xold2.is_empty() {
            self.xold2 = self.xold1.clone();
        }
        for i in 0..x.len() {
            if frozen[i] {
                continue;
            }
            let (xi, l, u, g) = (x[i], self.low[i], self.upp[i], grad[i]);
            let (gp, gm) = (g.max(0.0), (-g).max(0.0));
            let p = (u - xi).powi(2) * (1.001 * gp + 0.001 * gm + RAA0 / range);
            let q = (xi - l).powi(2) * (0.001 * gp + 1.001 * gm + RAA0 / range);
            let (sp, sq) = (p.sqrt(), q.sqrt());
            let unconstrained = (sp * l + sq * u) / (sp + sq);
            let lower = self.xmin.max(l + 0.1 * (xi - l)).max(xi - self.move_limit);
            let upper = self.xmax.min(u - 0.1 * (u - xi)).min(xi + self.move_limit);
            x[i] = limit_move(xi, unconstrained.clamp(lower, upper), self.move_limit);
        }
    }
}

/// Optimized design with the data needed to reproduce it.
#[derive(Debug, Clone)]
pub struct OptimizationResult {
    /// Filtered design seen by the simulation.
    pub design: DesignField,
    /// Raw design variables after the last update.
    pub raw: DesignField,
    /// Compliance and penalty of the initial design.
    pub c_star: f64,
    pub p_star: f64,
    /// Compliance of the returned design.
    pub compliance: f64,
}

/// Initial raw design of a simulation-grid problem.
pub fn initial_design(
    problem: &ProblemSpec,
    init: InitMode,
    free: bool,
) -> Result<DesignField, OptimizerError> {
    let width = problem.volume_fraction / 3.0;
    let theta3 = match init {
        InitMode::Uniform => vec![PI / 2.0; problem.num_cells()],
        InitMode::Stress => principal_stress_init(problem)?.initial_theta3(),
    };
    let mut d = DesignField::equilateral(
        problem.nx,
        problem.ny,
        problem.active.clone(),
        width,
        &theta3,
    );
    d.free_orientations = free;
    Ok(d)
}

/// Runs the optimization loop from the configured initialization.
pub fn run_optimization(
    problem: &ProblemSpec,
    config: &OptimizerConfig,
) -> Result<OptimizationResult, OptimizerError> {
    let raw = initial_design(problem, config.init, config.free_orientations)?;
    optimize_from(problem, config, raw)
}

/// Runs the optimization loop from a given raw design.
pub fn optimize_from(
    problem: &ProblemSpec,
    config: &OptimizerConfig,
    mut raw: DesignField,
) -> Result<OptimizationResult, OptimizerError> {
    config.validate()?;
    problem.validate()?;
    if problem.coarsening != 1 {
        return Err(OptimizerError::InvalidConfig(
            "optimize on the simulation grid (coarsening 1)".into(),
        ));
    }
    let n = problem.num_cells();
    let filter = ConeFilter::new(
        problem.nx,
        problem.ny,
        &problem.active,
        config.filter_radius,
    );
    let mut model = FeModel::with_solver(problem, config.solver)?;
    let w = config.weight;
    let free = config.free_orientations;
    let frozen: Vec<bool> = problem.active.iter().map(|a| !a).collect();
    let n_angles = if free { 3 } else { 1 };
    let mut mma = MmaState::new(n * n_angles, -THETA_BOUND, THETA_BOUND, ANGLE_MOVE);
    let frozen_block: Vec<bool> = frozen
        .iter()
        .flat_map(|&f| std::iter::repeat(f).take(n_angles))
        .collect();

    let mut c_star = f64::NAN;
    let mut p_star = f64::NAN;
    raw.history.clear();
    for iteration in 0..=config.max_iter {
        let phys = physical_design(&raw, &filter);
        let ev = evaluate_design(&mut model, problem, &phys)?;
        if iteration == 0 {
            c_star = ev.compliance;
            p_star = ev.regularization;
            if w < 1.0 && p_star <= 0.0 {
                return Err(OptimizerError::ZeroRegularizationReference);
            }
        }
        let obj = objective(ev.compliance, ev.regularization, c_star, p_star, w)?;
        if !obj.is_finite() || !ev.compliance.is_finite() {
            return Err(OptimizerError::NonFinite {
                iteration,
                detail: format!(
                    "compliance {} penalty {} objective {} mean density {}",
                    ev.compliance,
                    ev.regularization,
                    obj,
                    phys.mean_density()
                ),
            });
        }
        let mut record = IterationRecord {
            iteration,
            compliance: ev.compliance,
            regularization: ev.regularization,
            objective: obj,
            volume: phys.mean_density(),
            width_move: 0.0,
            angle_move: 0.0,
        };
        if iteration == config.max_iter {
            raw.history.push(record);
            raw.iteration = iteration;
            let mut design = phys;
            design.history = raw.history.clone();
            return Ok(OptimizationResult {
                design,
                raw,
                c_star,
                p_star,
                compliance: ev.compliance,
            });
        }

        // Objective gradients with respect to physical variables.
        let cw = w / c_star;
        let pw = if w < 1.0 { (1.0 - w) / p_star } else { 0.0 };
        let g_alpha_phys: Vec<[f64; 3]> = ev.d_alpha.iter().map(|d| d.map(|v| cw * v)).collect();
        let g_alpha = filter.apply_transpose3(&g_alpha_phys);
        let oc = oc_update_widths(
            &raw.alpha,
            &g_alpha,
            &problem.active,
            &filter,
            problem.volume_fraction,
            problem.width_bounds,
            WIDTH_MOVE,
        )?;
        record.width_move = max_change(&raw.alpha, &oc.alpha);
        record.volume = oc.volume;
        raw.alpha = oc.alpha;

        if free {
            let g_phys: Vec<[f64; 3]> = (0..n)
                .map(|c| {
                    let d = ev.d_angle[c];
                    [
                        cw * d[0],
                        cw * d[1],
                        cw * d[2] + pw * ev.d_regularization[c],
                    ]
                })
                .collect();
            let g = filter.apply_transpose3(&g_phys);
            let mut x: Vec<f64> = raw.angles.iter().flatten().copied().collect();
            let grad: Vec<f64> = g.iter().flatten().copied().collect();
            mma.update(&mut x, &grad, &frozen_block);
            let new: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            record.angle_move = max_change(&raw.angles, &new);
            raw.angles = new;
        } else {
            let d_theta = ev.d_theta3();
            let g_phys: Vec<f64> = (0..n)
                .map(|c| cw * d_theta[c] + pw * ev.d_regularization[c])
                .collect();
            let g = filter.apply_transpose(&g_phys);
            let mut x: Vec<f64> = raw.angles.iter().map(|a| a[2]).collect();
            mma.update(&mut x, &g, &frozen);
            let new: Vec<[f64; 3]> = x.into_iter().map(equilateral_normals).collect();
            record.angle_move = raw
                .angles
                .iter()
                .zip(&new)
                .map(|(a, b)| (a[2] - b[2]).abs())
                .fold(0.0, f64::max);
            raw.angles = new;
        }
        raw.history.push(record);
        raw.iteration = iteration + 1;
    }
    unreachable!("loop returns at the last iteration")
}

/// Pulls `x` toward `from` until the rounded move `|x - from|` is at most
/// `limit`; clamping to `from + limit` alone can overshoot by an ulp.
fn limit_move(from: f64, mut x: f64, limit: f64) -> f64 {
    while (x - from).abs() > limit {
        x = if x > from { x.next_down() } else { x.next_up() };
    }
    x
}

fn max_change(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).abs()))
        .fold(0.0, f64::max)
}

//! Stage orchestration: optimize, triangulate, de-homogenize, evaluate and
//! render, with every intermediate result written to an output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dehomog::{dehomogenize, DehomogError, DehomogParams, LatticeDesign};
use crate::domain::Domain;
use crate::fea::{restrict_problem, FeaError, ProblemSpec};
use crate::io::{self, Checkpoint, IoError, RunSettings};
use crate::meshing::{triangulate, FieldAlignedMesh, MeshError, MeshParams};
use crate::optimizer::{run_optimization, OptimizerConfig, OptimizerError};
use crate::render::render_svg;
use crate::validate::{evaluate, EvaluationReport, ValidateError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Fea(#[from] FeaError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Dehomog(#[from] DehomogError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
    #[error("cannot run stage `{stage}`: missing input {}", path.display())]
    MissingInput { stage: Stage, path: PathBuf },
}

impl PipelineError {
    /// Whether the error comes from bad inputs rather than a numerical failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::Config(_) | Self::Io(_) | Self::MissingInput { .. } => true,
            Self::Fea(e)
            | Self::Optimizer(OptimizerError::Fea(e))
            | Self::Validate(ValidateError::Fea(e)) => {
                matches!(e, FeaError::InvalidProblem(_))
            }
            Self::Optimizer(e) => matches!(e, OptimizerError::InvalidConfig(_)),
            Self::Mesh(e) => matches!(e, MeshError::InvalidParameters(_)),
            Self::Validate(e) => matches!(e, ValidateError::GridMismatch { .. }),
            Self::Dehomog(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Optimize,
    Triangulate,
    Dehomog,
    Evaluate,
    Render,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Optimize,
        Stage::Triangulate,
        Stage::Dehomog,
        Stage::Evaluate,
        Stage::Render,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Optimize => "optimize",
            Stage::Triangulate => "triangulate",
            Stage::Dehomog => "dehomog",
            Stage::Evaluate => "evaluate",
            Stage::Render => "render",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Mesh resolution, as a lattice count or an edge length in simulation cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeshSize {
    Count(usize),
    EdgeLength(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub optimizer: OptimizerConfig,
    pub mesh_size: MeshSize,
    pub smoothing_iters: usize,
    pub seed: u64,
    pub dehomog: DehomogParams,
    /// Also optimize with free orientations to report `C*`.
    pub free_reference: bool,
    /// SVG pixels per simulation cell.
    pub render_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            mesh_size: MeshSize::Count(684),
            smoothing_iters: 0,
            seed: 0,
            dehomog: DehomogParams::default(),
            free_reference: false,
            render_scale: 4.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.optimizer.validate()?;
        match self.mesh_size {
            MeshSize::Count(0) => {
                return Err(PipelineError::Config(
                    "target lattice count must be positive".into(),
                ))
            }
            MeshSize::EdgeLength(h) if !(h > 0.0 && h.is_finite()) => {
                return Err(PipelineError::Config(format!(
                    "edge length {h} must be positive"
                )))
            }
            _ => {}
        }
        let d = &self.dehomog;
        if !(0.0..1.0).contains(&d.drop_ratio) {
            return Err(PipelineError::Config(format!(
                "drop ratio {} must lie in [0, 1)",
                d.drop_ratio
            )));
        }
        if d.min_samples == 0 || d.max_resample == 0 {
            return Err(PipelineError::Config(
                "sample counts must be positive".into(),
            ));
        }
        if !(self.render_scale > 0.0 && self.render_scale.is_finite()) {
            return Err(PipelineError::Config(format!(
                "render scale {} must be positive",
                self.render_scale
            )));
        }
        Ok(())
    }
}

/// Stage timings in seconds, kept apart from the deterministic artifacts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub optimize: Option<f64>,
    pub triangulate: Option<f64>,
    pub dehomog: Option<f64>,
}

impl Timings {
    /// De-homogenization time, meshing included.
    pub fn dehomogenization(&self) -> Option<f64> {
        Some(self.triangulate? + self.dehomog?)
    }
}

/// File layout of an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn problem(&self) -> PathBuf {
        self.dir.join("problem.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }

    pub fn mesh(&self) -> PathBuf {
        self.dir.join("mesh.txt")
    }

    pub fn lattice(&self) -> PathBuf {
        self.dir.join("lattice.txt")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn render(&self) -> PathBuf {
        self.dir.join("render.svg")
    }

    pub fn timings(&self) -> PathBuf {
        self.dir.join("timings.json")
    }

    fn read_timings(&self) -> Timings {
        std::fs::read_to_string(self.timings())
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    fn update_timings(&self, f: impl FnOnce(&mut Timings)) -> Result<(), PipelineError> {
        let mut t = self.read_timings();
        f(&mut t);
        let s = serde_json::to_string_pretty(&t).map_err(IoError::from)?;
        std::fs::write(self.timings(), s).map_err(|source| IoError::File {
            path: self.timings().display().to_string(),
            source,
        })?;
        Ok(())
    }

    fn require(&self, stage: Stage, path: PathBuf) -> Result<PathBuf, PipelineError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingInput { stage, path })
        }
    }
}

/// Optimizes on the simulation grid of `fine`.
pub fn optimize(fine: &ProblemSpec, config: &PipelineConfig) -> Result<Checkpoint, PipelineError> {
    config.validate()?;
    let sim = restrict_problem(fine)?;
    let result = run_optimization(&sim, &config.optimizer)?;
    let mut cp = Checkpoint::new(&fine.name, RunSettings::from(&config.optimizer), &result);
    if config.free_reference && !config.optimizer.free_orientations {
        let free = OptimizerConfig {
            free_orientations: true,
            ..config.optimizer
        };
        cp.c_free = Some(run_optimization(&sim, &free)?.compliance);
    }
    Ok(cp)
}

fn check_grid(fine: &ProblemSpec, cp: &Checkpoint) -> Result<(), PipelineError> {
    let sim = fine.simulation_resolution();
    if (cp.design.nx, cp.design.ny) != sim {
        return Err(PipelineError::Config(format!(
            "checkpoint grid {}x{} does not match the simulation grid {}x{} of problem `{}`",
            cp.design.nx, cp.design.ny, sim.0, sim.1, fine.name
        )));
    }
    Ok(())
}

pub fn mesh_params(sim_domain: &Domain, config: &PipelineConfig) -> MeshParams {
    let mut p = match config.mesh_size {
        MeshSize::Count(n) => MeshParams::for_count(sim_domain, n),
        MeshSize::EdgeLength(h) => MeshParams::new(h),
    };
    p.smoothing_iters = config.smoothing_iters;
    p.seed = config.seed;
    p
}

/// Field-aligned mesh of the optimized design over the simulation-grid domain.
pub fn mesh_design(
    fine: &ProblemSpec,
    cp: &Checkpoint,
    config: &PipelineConfig,
) -> Result<FieldAlignedMesh, PipelineError> {
    config.validate()?;
    check_grid(fine, cp)?;
    let sim = restrict_problem(fine)?;
    let domain = Domain::from_problem(&sim);
    Ok(triangulate(
        &cp.design,
        &domain,
        &mesh_params(&domain, config),
    )?)
}

/// Lattice on the mesh, with the boundary skin taken on the fine grid.
pub fn lattice_design(
    fine: &ProblemSpec,
    cp: &Checkpoint,
    mesh: &FieldAlignedMesh,
    config: &PipelineConfig,
) -> Result<LatticeDesign, PipelineError> {
    config.validate()?;
    check_grid(fine, cp)?;
    Ok(dehomogenize(
        &cp.design,
        mesh,
        &Domain::from_problem(fine),
        &config.dehomog,
    )?)
}

pub fn evaluate_lattice(
    fine: &ProblemSpec,
    cp: &Checkpoint,
    lattice: &LatticeDesign,
    config: &PipelineConfig,
) -> Result<EvaluationReport, PipelineError> {
    check_grid(fine, cp)?;
    let mut report = evaluate(lattice, &cp.design, fine, config.optimizer.solver)?;
    report.c_star = cp.c_free;
    Ok(report)
}

/// Runs the stages from `first` through `last`, reading earlier results
/// from `out` and writing each result as soon as it is available.
pub fn run_pipeline(
    fine: &ProblemSpec,
    config: &PipelineConfig,
    out: &Artifacts,
    first: Stage,
    last: Stage,
) -> Result<Option<EvaluationReport>, PipelineError> {
    config.validate()?;
    fine.validate()?;
    std::fs::create_dir_all(&out.dir).map_err(|source| IoError::File {
        path: out.dir.display().to_string(),
        source,
    })?;
    let runs = |s: Stage| first <= s && s <= last;
    io::write_problem(&out.problem(), fine)?;

    let cp = if runs(Stage::Optimize) {
        let start = Instant::now();
        let cp = optimize(fine, config)?;
        io::write_checkpoint(&out.checkpoint(), &cp)?;
        let secs = start.elapsed().as_secs_f64();
        out.update_timings(|t| {
            *t = Timings {
                optimize: Some(secs),
                ..Timings::default()
            }
        })?;
        cp
    } else {
        io::read_checkpoint(&out.require(first, out.checkpoint())?)?
    };
    if last == Stage::Optimize {
        return Ok(None);
    }

    let mesh = if runs(Stage::Triangulate) {
        let start = Instant::now();
        let mesh = mesh_design(fine, &cp, config)?;
        io::write_mesh(&out.mesh(), &mesh)?;
        let secs = start.elapsed().as_secs_f64();
        out.update_timings(|t| t.triangulate = Some(secs))?;
        mesh
    } else {
        io::read_mesh(&out.require(first, out.mesh())?)?
    };
    if last == Stage::Triangulate {
        return Ok(None);
    }

    let lattice = if runs(Stage::Dehomog) {
        let start = Instant::now();
        let lattice = lattice_design(fine, &cp, &mesh, config)?;
        io::write_lattice(&out.lattice(), &lattice)?;
        let secs = start.elapsed().as_secs_f64();
        out.update_timings(|t| t.dehomog = Some(secs))?;
        lattice
    } else {
        io::read_lattice(&out.require(first, out.lattice())?)?
    };

    let mut report = None;
    if runs(Stage::Evaluate) {
        let mut r = evaluate_lattice(fine, &cp, &lattice, config)?;
        let timings = out.read_timings();
        r.t0 = timings.optimize;
        r.t = timings.dehomogenization();
        io::write_report(&out.report(), &r)?;
        report = Some(r);
    }
    if runs(Stage::Render) {
        write_render(
            &out.render(),
            fine,
            &cp,
            Some(&mesh),
            Some(&lattice),
            config.render_scale,
        )?;
    }
    Ok(report)
}

pub fn write_render(
    path: &Path,
    fine: &ProblemSpec,
    cp: &Checkpoint,
    mesh: Option<&FieldAlignedMesh>,
    lattice: Option<&LatticeDesign>,
    scale: f64,
) -> Result<(), PipelineError> {
    let domain = Domain::from_problem(fine);
    let svg = render_svg(&cp.design, mesh, lattice, Some(&domain), scale);
    std::fs::write(path, svg).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems;

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            optimizer: OptimizerConfig {
                max_iter: 5,
                ..OptimizerConfig::default()
            },
            mesh_size: MeshSize::EdgeLength(4.0),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn stages_write_their_artifacts_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let out = Artifacts::new(dir.path());
        let fine = problems::cantilever(24, 12, 2);
        let cfg = small_config();
        let report = run_pipeline(&fine, &cfg, &out, Stage::Optimize, Stage::Render)
            .unwrap()
            .unwrap();
        for p in [
            out.problem(),
            out.checkpoint(),
            out.mesh(),
            out.lattice(),
            out.report(),
            out.render(),
            out.timings(),
        ] {
            assert!(p.exists(), "{}", p.display());
        }
        assert!(report.t0.is_some() && report.t.is_some());
        let lattice = std::fs::read(out.lattice()).unwrap();
        let again = run_pipeline(&fine, &cfg, &out, Stage::Evaluate, Stage::Evaluate)
            .unwrap()
            .unwrap();
        assert_eq!(again.c, report.c);
        assert_eq!(std::fs::read(out.lattice()).unwrap(), lattice);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let out = Artifacts::new(dir.path());
        let fine = problems::cantilever(8, 4, 1);
        let err =
            run_pipeline(&fine, &small_config(), &out, Stage::Dehomog, Stage::Dehomog).unwrap_err();
        assert!(matches!(err, PipelineError::MissingInput { .. }) && err.is_validation());
    }

    #[test]
    fn zero_weight_is_a_validation_error() {
        let mut cfg = small_config();
        cfg.optimizer.weight = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("(0, 1]"));
    }
}

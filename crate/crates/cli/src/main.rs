//! Command-line driver for optimization, triangulation, de-homogenization,
//! evaluation and rendering of graded triangular lattices.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use trilattice::dehomog::DehomogParams;
use trilattice::fea::{set_solver_threads, ProblemSpec};
use trilattice::io;
use trilattice::optimizer::{InitMode, OptimizerConfig};
use trilattice::pipeline::{
    run_pipeline, Artifacts, MeshSize, PipelineConfig, PipelineError, Stage,
};
use trilattice::problems;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "trilattice",
    version,
    about = "Graded triangular lattices from homogenization-based optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Output directory; later stages read their inputs from it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed of the meshing sampler.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Solver threads, 0 for all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize widths and orientations on the simulation grid.
    Optimize(StageArgs),
    /// Build the field-aligned triangle mesh from the checkpoint.
    Triangulate(StageArgs),
    /// Turn the mesh and design into a lattice.
    Dehomog(StageArgs),
    /// Compare the lattice with the homogenized design on the fine grid.
    Evaluate(StageArgs),
    /// Draw density, streamlines, mesh and lattice as SVG.
    Render(StageArgs),
    /// Run all stages, or a single one with --stage.
    Pipeline {
        #[command(flatten)]
        args: StageArgs,
        /// Run only this stage, reading earlier results from --out.
        #[arg(long, value_enum)]
        stage: Option<StageName>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StageName {
    Optimize,
    Triangulate,
    Dehomog,
    Evaluate,
    Render,
}

impl From<StageName> for Stage {
    fn from(s: StageName) -> Self {
        match s {
            StageName::Optimize => Stage::Optimize,
            StageName::Triangulate => Stage::Triangulate,
            StageName::Dehomog => Stage::Dehomog,
            StageName::Evaluate => Stage::Evaluate,
            StageName::Render => Stage::Render,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum InitName {
    Stress,
    Uniform,
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Problem file, or a bundled problem name (femur, mbb, beam, triangle,
    /// cantilever). Defaults to the problem saved in --out.
    #[arg(long)]
    problem: Option<String>,
    /// Fine-to-simulation grid factor for bundled problems.
    #[arg(long, default_value_t = 4)]
    fine_factor: usize,
    /// Orientation initialization.
    #[arg(long, value_enum, default_value = "stress")]
    init: InitName,
    /// Weight W of compliance against orientation regularity, in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    weight: f64,
    /// Optimization iterations.
    #[arg(long, default_value_t = 300)]
    iters: usize,
    /// Density filter radius in simulation cells.
    #[arg(long, default_value_t = 2.0)]
    filter_radius: f64,
    /// Optimize the three layer orientations independently.
    #[arg(long)]
    free_orientations: bool,
    /// Also optimize with free orientations and report C*.
    #[arg(long)]
    c_star: bool,
    /// Target number of lattice triangles.
    #[arg(long, conflicts_with = "edge_length")]
    target_lattices: Option<usize>,
    /// Lattice edge length in simulation cells.
    #[arg(long)]
    edge_length: Option<f64>,
    /// Orientation smoothing sweeps before meshing.
    #[arg(long, default_value_t = 0)]
    smooth_iters: usize,
    /// Triangles with a lower target ratio are left empty.
    #[arg(long, default_value_t = 0.02)]
    drop_ratio: f64,
    /// Skip the gap patches at lattice vertices.
    #[arg(long)]
    no_gap_fill: bool,
    /// Leave the strip between mesh and domain outline empty.
    #[arg(long)]
    no_boundary_skin: bool,
    /// SVG pixels per simulation cell.
    #[arg(long, default_value_t = 4.0)]
    render_scale: f64,
}

impl StageArgs {
    fn config(&self, seed: u64) -> PipelineConfig {
        let mesh_size = match (self.target_lattices, self.edge_length) {
            (_, Some(h)) => MeshSize::EdgeLength(h),
            (Some(n), None) => MeshSize::Count(n),
            (None, None) => MeshSize::Count(684),
        };
        PipelineConfig {
            optimizer: OptimizerConfig {
                init: match self.init {
                    InitName::Stress => InitMode::Stress,
                    InitName::Uniform => InitMode::Uniform,
                },
                weight: self.weight,
                max_iter: self.iters,
                filter_radius: self.filter_radius,
                free_orientations: self.free_orientations,
                ..OptimizerConfig::default()
            },
            mesh_size,
            smoothing_iters: self.smooth_iters,
            seed,
            dehomog: DehomogParams {
                drop_ratio: self.drop_ratio,
                fill_gaps: !self.no_gap_fill,
                boundary_skin: !self.no_boundary_skin,
                ..DehomogParams::default()
            },
            free_reference: self.c_star,
            render_scale: self.render_scale,
        }
    }

    fn problem(&self, out: &Artifacts) -> Result<ProblemSpec, PipelineError> {
        let Some(p) = &self.problem else {
            return Ok(io::read_problem(&out.problem())?);
        };
        let path = PathBuf::from(p);
        if path.exists() {
            return Ok(io::read_problem(&path)?);
        }
        if self.fine_factor == 0 {
            return Err(PipelineError::Config(
                "fine factor must be at least 1".into(),
            ));
        }
        problems::by_name(p, self.fine_factor).ok_or_else(|| {
            PipelineError::Config(format!(
                "`{p}` is neither a file nor a bundled problem ({})",
                problems::NAMES.join(", ")
            ))
        })
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    set_solver_threads(cli.global.threads);
    let out = Artifacts::new(&cli.global.out);
    let (args, first, last) = match &cli.command {
        Command::Optimize(a) => (a, Stage::Optimize, Stage::Optimize),
        Command::Triangulate(a) => (a, Stage::Triangulate, Stage::Triangulate),
        Command::Dehomog(a) => (a, Stage::Dehomog, Stage::Dehomog),
        Command::Evaluate(a) => (a, Stage::Evaluate, Stage::Evaluate),
        Command::Render(a) => (a, Stage::Render, Stage::Render),
        Command::Pipeline {
            args,
            stage: Some(s),
        } => (args, Stage::from(*s), Stage::from(*s)),
        Command::Pipeline { args, stage: None } => (args, Stage::Optimize, Stage::Render),
    };
    let config = args.config(cli.global.seed);
    config.validate()?;
    let fine = args.problem(&out)?;
    let report = run_pipeline(&fine, &config, &out, first, last)?;
    if let Some(r) = report {
        println!("{r}");
    }
    let written: Vec<String> = Stage::ALL
        .iter()
        .filter(|s| first <= **s && **s <= last)
        .filter_map(|s| match s {
            Stage::Optimize => Some(out.checkpoint()),
            Stage::Triangulate => Some(out.mesh()),
            Stage::Dehomog => Some(out.lattice()),
            Stage::Evaluate => Some(out.report()),
            Stage::Render => Some(out.render()),
        })
        .map(|p| p.display().to_string())
        .collect();
    eprintln!("wrote {}", written.join(", "));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_NUMERICAL
            })
        }
    }
}

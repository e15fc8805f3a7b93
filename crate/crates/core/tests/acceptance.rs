//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_UNMET` are expected to fail; their failure is
//! printed but does not fail the run. Any other failure does.

mod common;

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trilattice::dehomog::{solve_thickness, LatticeDesign};
use trilattice::domain::{Domain, Vec2};
use trilattice::fea::{restrict_problem, FeModel, ProblemSpec};
use trilattice::io;
use trilattice::meshing::{min_angle, triangle_angles, triangulate, FieldAlignedMesh, MeshParams};
use trilattice::optimizer::{
    edge_penalty, evaluate_design, regularization, run_optimization, DesignField, OptimizerConfig,
    ANGLE_MOVE, WIDTH_MOVE,
};
use trilattice::pipeline::{run_pipeline, Artifacts, MeshSize, PipelineConfig, Stage};
use trilattice::problems;
use trilattice::rank3::{elasticity_matrix, equilateral_normals, LaminateSpec, MaterialConstants};
use trilattice::validate::EvaluationReport;

const KNOWN_UNMET: [u32; 2] = [2, 9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn c1_moment_route() -> Outcome {
    let mat = MaterialConstants::default();
    let mut r = rng(1);
    let specs: Vec<LaminateSpec> = (0..10_000)
        .map(|_| {
            let alpha = [
                r.random_range(0.01..0.99),
                r.random_range(0.01..0.99),
                r.random_range(0.01..0.99),
            ];
            LaminateSpec::new(alpha, r.random_range(-PI..PI)).unwrap()
        })
        .collect();
    let start = Instant::now();
    let lib: Vec<_> = specs
        .iter()
        .map(|s| elasticity_matrix(s, &mat).unwrap())
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for (s, m) in specs.iter().zip(&lib) {
        let oracle = common::tensor_route(s.alpha, s.normal_angles(), &mat);
        worst = worst.max(common::max_abs(&(m.0 - oracle)));
    }
    outcome(
        worst <= 1e-9 && secs < 5.0,
        format!("max |S_moment - S_tensor| = {worst:.2e} (tol 1e-9), 10^4 specs in {secs:.3} s (limit 5 s)"),
    )
}

fn c2_equal_width_isotropy() -> Outcome {
    let mat = MaterialConstants::default();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let w = r.random_range(0.01..0.99);
        let s = |t: f64| {
            elasticity_matrix(&LaminateSpec::new([w; 3], t).unwrap(), &mat)
                .unwrap()
                .0
        };
        let (a, b) = (r.random_range(-PI..PI), r.random_range(-PI..PI));
        worst = worst.max(common::max_abs(&(s(a) - s(b))));
    }
    outcome(
        worst <= 1e-9,
        format!("max |S(theta3) - S(theta3')| at equal widths = {worst:.3e} (tol 1e-9)"),
    )
}

fn c3_adjoint_vs_finite_differences() -> Outcome {
    let start = Instant::now();
    let problem = common::two_load_problem(6);
    let mut model = FeModel::new(&problem).unwrap();
    let mut r = rng(3);
    let n = problem.num_cells();
    let theta3: Vec<f64> = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
    let mut design = DesignField::equilateral(6, 6, problem.active.clone(), 0.2, &theta3);
    for a in &mut design.alpha {
        *a = [
            r.random_range(0.05..0.6),
            r.random_range(0.05..0.6),
            r.random_range(0.05..0.6),
        ];
    }
    let eval = evaluate_design(&mut model, &problem, &design).unwrap();
    let mut compliance =
        |d: &DesignField| evaluate_design(&mut model, &problem, d).unwrap().compliance;
    let h = 1e-6;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for c in 0..n {
        for k in 0..3 {
            let (mut up, mut down) = (design.clone(), design.clone());
            up.alpha[c][k] += h;
            down.alpha[c][k] -= h;
            pairs.push((
                eval.d_alpha[c][k],
                (compliance(&up) - compliance(&down)) / (2.0 * h),
            ));
        }
    }
    let d_theta = eval.d_theta3();
    for c in 0..n {
        let (mut up, mut down) = (design.clone(), design.clone());
        up.angles[c] = equilateral_normals(theta3[c] + h);
        down.angles[c] = equilateral_normals(theta3[c] - h);
        pairs.push((
            d_theta[c],
            (compliance(&up) - compliance(&down)) / (2.0 * h),
        ));
    }
    let reg = regularization(6, 6, &problem.active, &theta3);
    for c in 0..n {
        let (mut up, mut down) = (theta3.clone(), theta3.clone());
        up[c] += h;
        down[c] -= h;
        let fd = (regularization(6, 6, &problem.active, &up).total
            - regularization(6, 6, &problem.active, &down).total)
            / (2.0 * h);
        pairs.push((reg.gradient[c], fd));
    }
    let scale = pairs.iter().fold(0.0f64, |a, p| a.max(p.1.abs()));
    let floor = 1e-3 * scale;
    let worst = pairs
        .iter()
        .map(|(a, f)| (a - f).abs() / f.abs().max(floor))
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-3 && secs < 30.0,
        format!(
            "{} derivatives, worst relative error {worst:.2e} (tol 1e-3, floor {floor:.1e}), {secs:.2} s (limit 30 s)",
            pairs.len()
        ),
    )
}

fn c4_oc_constraints() -> Outcome {
    let problem = problems::mbb(60, 30, 1);
    let result = run_optimization(&problem, &OptimizerConfig::default()).unwrap();
    // One record per update plus one for the final evaluation.
    let h = &result.design.history;
    let updates = h.iter().filter(|r| r.iteration < 300).count();
    let vol = h
        .iter()
        .map(|r| r.volume - problem.volume_fraction)
        .fold(f64::NEG_INFINITY, f64::max);
    let wm = h.iter().map(|r| r.width_move).fold(0.0, f64::max);
    let am = h.iter().map(|r| r.angle_move).fold(0.0, f64::max);
    outcome(
        updates == 300 && vol <= 1e-4 && wm <= WIDTH_MOVE && am <= ANGLE_MOVE,
        format!(
            "{updates} updates, max(V - V_F) = {vol:.2e} (tol 1e-4), max width move {wm:e} (<= 0.01), \
             max angle move {am:e} rad (<= pi/180 = {ANGLE_MOVE:e})"
        ),
    )
}

fn c5_penalty_endpoints() -> Outcome {
    let (a, b) = (edge_penalty(PI / 3.0), edge_penalty(PI / 6.0));
    outcome(
        a == 0.0 && b == 1.0,
        format!("penalty(pi/3) = {a:e}, penalty(pi/6) = {b:e}"),
    )
}

fn c6_equilateral_vs_free() -> Outcome {
    let start = Instant::now();
    let problem = restrict_problem(&problems::beam(1)).unwrap();
    let equi = run_optimization(&problem, &OptimizerConfig::default()).unwrap();
    let free = run_optimization(
        &problem,
        &OptimizerConfig {
            free_orientations: true,
            ..OptimizerConfig::default()
        },
    )
    .unwrap();
    let gap = (equi.compliance - free.compliance) / free.compliance;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        gap <= 0.10 && secs <= 900.0,
        format!(
            "beam C0 = {:.4}, C* = {:.4}, (C0 - C*)/C* = {gap:.4} (<= 0.10), {secs:.1} s (limit 900 s)",
            equi.compliance, free.compliance
        ),
    )
}

fn c7_thickness_closed_form() -> Outcome {
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let side = r.random_range(0.5..10.0);
        let rot = r.random_range(0.0..2.0 * PI);
        let origin = Vec2::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        let tri: [Vec2; 3] = std::array::from_fn(|k| {
            origin
                + Vec2::new(
                    (rot + 2.0 * PI * k as f64 / 3.0).cos(),
                    (rot + 2.0 * PI * k as f64 / 3.0).sin(),
                ) * (side / 3f64.sqrt())
        });
        let widths = [
            r.random_range(0.01..1.0),
            r.random_range(0.01..1.0),
            r.random_range(0.01..1.0),
        ];
        let rho = r.random_range(0.01..0.99);
        let inradius = side / (2.0 * 3f64.sqrt());
        let sol = solve_thickness(&tri, &widths, rho);
        let sum: f64 = sol.insets.iter().sum();
        let exact = 3.0 * inradius * (1.0 - (1.0 - rho).sqrt());
        worst = worst.max((sum - exact).abs() / inradius);
    }
    outcome(
        worst <= 1e-9,
        format!("max |sum d - 3r(1 - sqrt(1 - rho))| / r = {worst:.2e} (tol 1e-9)"),
    )
}

/// Result of the full femur pipeline, shared by several criteria.
struct FemurRun {
    report: EvaluationReport,
    mesh: FieldAlignedMesh,
    lattice: LatticeDesign,
    secs: f64,
}

fn pipeline_run(
    fine: &ProblemSpec,
    config: &PipelineConfig,
    dir: &Path,
    last: Stage,
) -> (Option<EvaluationReport>, f64) {
    let start = Instant::now();
    let report = run_pipeline(fine, config, &Artifacts::new(dir), Stage::Optimize, last).unwrap();
    (report, start.elapsed().as_secs_f64())
}

fn c8_femur_conservation(run: &FemurRun) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut kept = 0;
    for (t, lt) in run.lattice.triangles.iter().enumerate() {
        if let Some(lt) = lt {
            kept += 1;
            worst = worst.max((run.lattice.raster_ratio(t, 100, false) - lt.solved_ratio).abs());
        }
    }
    let v = run.report.v;
    outcome(
        (v - 0.5).abs() <= 0.01 && worst <= 0.02,
        format!(
            "femur V = {v:.4} (0.50 +- 0.01, lattice geometry {:.4}), worst per-triangle ratio error {worst:.4} \
             over {kept} triangles (<= 0.02)",
            run.lattice.volume_fraction
        ),
    )
}

fn c9_design_deviation(femur: &FemurRun, triangle: &(EvaluationReport, f64)) -> Outcome {
    let (f, t) = (&femur.report, &triangle.0);
    let total = femur.secs + triangle.1;
    outcome(
        f.xi <= 0.20 && t.xi <= 0.15 && total <= 1800.0,
        format!(
            "femur xi = {:.4} (<= 0.20; C0 {:.3}, C {:.3}), triangle xi = {:.4} (<= 0.15; C0 {:.3}, C {:.3}), \
             pipelines {total:.0} s (limit 1800 s)",
            f.xi, f.c0, f.c, t.xi, t.c0, t.c
        ),
    )
}

fn c10_mesh_quality(run: &FemurRun) -> Outcome {
    let count = run.mesh.triangles.len();
    let good = (0..count)
        .filter(|&t| min_angle(&run.mesh.triangle(t)) >= 40f64.to_radians())
        .count();
    let share = good as f64 / count as f64;
    let count_ok = (count as f64 - 684.0).abs() <= 0.15 * 684.0;

    let (nx, ny) = (40, 30);
    let domain = Domain::new(nx, ny, 1.0, vec![true; nx * ny]);
    let design = DesignField::equilateral(nx, ny, vec![true; nx * ny], 0.2, &vec![0.4; nx * ny]);
    let mesh = triangulate(&design, &domain, &MeshParams::new(4.0)).unwrap();
    let boundary = mesh.boundary_vertices();
    let mut angle_dev: f64 = 0.0;
    let mut length_dev: f64 = 0.0;
    let mut interior = 0;
    for t in 0..mesh.triangles.len() {
        if mesh.triangles[t].iter().any(|&v| boundary[v]) {
            continue;
        }
        interior += 1;
        let tri = mesh.triangle(t);
        for a in triangle_angles(&tri) {
            angle_dev = angle_dev.max((a - PI / 3.0).abs());
        }
        for k in 0..3 {
            length_dev = length_dev.max(((tri[(k + 1) % 3] - tri[k]).norm() / mesh.h - 1.0).abs());
        }
    }
    let regular = interior > 50 && angle_dev <= 1e-9 && length_dev <= 1e-9;
    outcome(
        count_ok && share >= 0.9 && regular,
        format!(
            "femur {count} triangles (684 +- 15%), {:.1}% with min angle >= 40 deg (>= 90%); constant field: \
             {interior} interior triangles, max angle deviation {angle_dev:.1e} rad, max edge length deviation \
             {length_dev:.1e} (tol 1e-9)",
            100.0 * share
        ),
    )
}

fn c11_determinism(first: &Path, second: &Path) -> Outcome {
    let names = ["checkpoint.json", "mesh.txt", "lattice.txt"];
    let same: Vec<bool> = names
        .iter()
        .map(|n| {
            let a = std::fs::read(first.join(n)).unwrap();
            let b = std::fs::read(second.join(n)).unwrap();
            a == b
        })
        .collect();
    let detail = names
        .iter()
        .zip(&same)
        .map(|(n, s)| format!("{n} {}", if *s { "identical" } else { "differs" }));
    outcome(
        same.iter().all(|&s| s),
        detail.collect::<Vec<_>>().join(", "),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = guarded(f);
        let secs = start.elapsed().as_secs_f64();
        let tag = match (o.pass, KNOWN_UNMET.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!(
            "criterion {id:>2} {tag:<12} {name}: {} [{secs:.1} s]",
            o.detail
        );
        results.push((id, name, o, secs));
    };

    record(
        1,
        "rank-3 stiffness against the tensor route",
        &mut c1_moment_route,
    );
    record(2, "isotropy at equal widths", &mut c2_equal_width_isotropy);
    record(
        3,
        "adjoint sensitivities against finite differences",
        &mut c3_adjoint_vs_finite_differences,
    );
    record(
        4,
        "OC volume budget and move limits",
        &mut c4_oc_constraints,
    );
    record(5, "edge penalty endpoints", &mut c5_penalty_endpoints);
    record(
        6,
        "equilateral against free orientations",
        &mut c6_equilateral_vs_free,
    );
    record(7, "thickness closed form", &mut c7_thickness_closed_form);

    let scratch = tempfile::tempdir().unwrap();
    let (dir_a, dir_b, dir_t) = (
        scratch.path().join("femur_a"),
        scratch.path().join("femur_b"),
        scratch.path().join("triangle"),
    );
    let femur_fine = problems::femur(8);
    let femur_config = PipelineConfig::default();
    let femur = catch_unwind(AssertUnwindSafe(|| {
        let (report, secs) = pipeline_run(&femur_fine, &femur_config, &dir_a, Stage::Evaluate);
        FemurRun {
            report: report.unwrap(),
            mesh: io::read_mesh(&dir_a.join("mesh.txt")).unwrap(),
            lattice: io::read_lattice(&dir_a.join("lattice.txt")).unwrap(),
            secs,
        }
    }));
    let triangle = catch_unwind(AssertUnwindSafe(|| {
        let config = PipelineConfig {
            mesh_size: MeshSize::Count(1065),
            ..PipelineConfig::default()
        };
        let (report, secs) = pipeline_run(&problems::triangle(4), &config, &dir_t, Stage::Evaluate);
        (report.unwrap(), secs)
    }));
    let unavailable = || outcome(false, "pipeline run failed".into());

    record(
        8,
        "femur volume and per-triangle conservation",
        &mut || match &femur {
            Ok(run) => c8_femur_conservation(run),
            Err(_) => unavailable(),
        },
    );
    record(
        9,
        "design deviation of the lattices",
        &mut || match (&femur, &triangle) {
            (Ok(f), Ok(t)) => c9_design_deviation(f, t),
            _ => unavailable(),
        },
    );
    record(10, "lattice count and mesh quality", &mut || match &femur {
        Ok(run) => c10_mesh_quality(run),
        Err(_) => unavailable(),
    });
    record(11, "deterministic artifacts", &mut || {
        pipeline_run(&femur_fine, &femur_config, &dir_b, Stage::Dehomog);
        c11_determinism(&dir_a, &dir_b)
    });

    let passed = results.iter().filter(|r| r.2.pass).count();
    let unexpected: Vec<u32> = results
        .iter()
        .filter(|r| !r.2.pass && !KNOWN_UNMET.contains(&r.0))
        .map(|r| r.0)
        .collect();
    let known: Vec<u32> = results
        .iter()
        .filter(|r| !r.2.pass && KNOWN_UNMET.contains(&r.0))
        .map(|r| r.0)
        .collect();
    println!("acceptance: {passed}/{} criteria pass; known unmet {known:?}; unexpected failures {unexpected:?}", results.len());
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}

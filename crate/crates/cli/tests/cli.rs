use std::path::Path;
use std::process::{Command, Output};

fn trilattice(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trilattice"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

const SMALL: [&str; 8] = [
    "--problem",
    "cantilever",
    "--fine-factor",
    "2",
    "--iters",
    "5",
    "--target-lattices",
    "60",
];

#[test]
fn pipeline_writes_every_artifact_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let run = trilattice(dir.path(), &[&["pipeline"][..], &SMALL].concat());
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    for name in [
        "problem.json",
        "checkpoint.json",
        "mesh.txt",
        "lattice.txt",
        "report.json",
        "report.txt",
        "render.svg",
    ] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    assert!(String::from_utf8_lossy(&run.stdout).contains("cantilever"));

    // Later stages read the saved problem and results.
    std::fs::remove_file(dir.path().join("report.json")).unwrap();
    let resumed = trilattice(dir.path(), &["evaluate"]);
    assert!(
        resumed.status.success(),
        "{}",
        String::from_utf8_lossy(&resumed.stderr)
    );
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn invalid_weight_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = trilattice(
        dir.path(),
        &[&["optimize"][..], &SMALL, &["--weight", "0"]].concat(),
    );
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("(0, 1]"));
}

#[test]
fn unknown_problem_and_missing_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = trilattice(dir.path(), &["optimize", "--problem", "bridge"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("femur"));
    let missing = trilattice(dir.path(), &["triangulate"]);
    assert_eq!(missing.status.code(), Some(2));
}

//! End-to-end tests of the `hyperrom` binary: stage chaining, exit codes,
//! determinism and artifact verification.

use std::path::Path;
use std::process::{Command, Output};

use hyperrom::store::{read_block, read_manifest};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hyperrom"));
    c.env_remove("HYPERROM_SEED");
    c
}

fn exec(out: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary spawns")
}

/// Runs a command that must succeed and returns its stdout.
fn ok(out: &Path, args: &[&str]) -> String {
    let output = exec(out, args);
    assert!(
        output.status.success(),
        "hyperrom {args:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

/// Runs a command that must fail with the given exit code and returns stderr.
fn fails(out: &Path, args: &[&str], code: i32) -> String {
    let output = exec(out, args);
    assert_eq!(
        output.status.code(),
        Some(code),
        "hyperrom {args:?} expected exit {code}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn mesh_then_fom_persists_the_documented_snapshot_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    ok(out, &["--threads", "2", "mesh", "--divisions", "6"]);
    let stdout = ok(
        out,
        &["--threads", "2", "fom", "run", "--paths", "2", "--steps", "3"],
    );
    assert!(
        stdout.contains("persisted 6 snapshot columns"),
        "unexpected fom output: {stdout}"
    );

    let snapshots = read_block(&out.join("fom/snapshots.hrmb")).unwrap();
    assert_eq!(snapshots.ncols(), 6);
    assert_eq!(snapshots.nrows(), 3 * (6 * 6 * 6 - 1));

    let manifest = read_manifest(&out.join("fom")).unwrap();
    assert_eq!(manifest.kind, "fom");
    assert_eq!(manifest.inputs.len(), 1);
    assert_eq!(manifest.inputs[0].kind, "mesh");
    let entry = manifest
        .files
        .iter()
        .find(|f| f.name == "snapshots.hrmb")
        .expect("snapshot block listed");
    assert_eq!(entry.cols, 6);
}

#[test]
fn missing_upstream_stage_names_the_required_command() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();

    let err = fails(out, &["fom", "run"], 3);
    assert!(err.contains("mesh"), "stderr should name the mesh stage: {err}");
    assert!(err.contains("hyperrom mesh"), "stderr should hint the command: {err}");

    let err = fails(out, &["train", "reduce"], 3);
    assert!(err.contains("fom"), "stderr should name the fom stage: {err}");
    assert!(err.contains("fom run"), "stderr should hint the command: {err}");

    ok(out, &["mesh", "--divisions", "2"]);
    ok(out, &["fom", "run", "--paths", "1", "--steps", "1"]);
    let err = fails(out, &["train", "hyper"], 3);
    assert!(err.contains("reduce"), "stderr should name the reduce stage: {err}");
}

/// Runs the full documented stage chain on a small inhomogeneous cell.
fn run_small_pipeline(out: &Path) {
    ok(out, &["--threads", "2", "mesh", "--divisions", "4"]);
    ok(
        out,
        &[
            "--threads", "2", "fom", "run", "--paths", "3", "--train-paths", "2", "--steps", "4",
        ],
    );
    ok(
        out,
        &["--threads", "2", "train", "reduce", "--method", "pod", "--d", "4"],
    );
    ok(
        out,
        &["--threads", "2", "rom", "run", "--galerkin", "--record-residuals"],
    );
    ok(
        out,
        &["--threads", "2", "train", "hyper", "--method", "lehm", "--m", "12"],
    );
    ok(out, &["--threads", "2", "rom", "run", "--hyper"]);
}

#[test]
fn full_pipeline_runs_and_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    run_small_pipeline(out);
    ok(out, &["--threads", "2", "diag"]);

    assert!(out.join("reduce/basis_c0.hrmb").is_file());
    assert!(out.join("galerkin/residuals.hrmb").is_file());
    assert!(out.join("hyper/magic_dofs.hrmb").is_file());
    assert!(out.join("rom/errors.csv").is_file());
    assert!(out.join("rom/report.json").is_file());
    assert!(out.join("diag/eigs.csv").is_file());
    assert!(out.join("diag/correlation.csv").is_file());

    let magic = read_block(&out.join("hyper/magic_dofs.hrmb")).unwrap();
    assert_eq!(magic.nrows(), 12);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("rom/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["diverged"], 0);
    let err_u = report["mean_error_u_percent"].as_f64().expect("u error reported");
    assert!(
        err_u.is_finite() && err_u > 0.0 && err_u < 100.0,
        "POD d=4 error should be a sane percentage, got {err_u}"
    );

    let errors = std::fs::read_to_string(out.join("rom/errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 1 + 3, "header plus one row per path");

    let stdout = ok(out, &["verify"]);
    assert!(stdout.contains("verify: OK"), "verify output: {stdout}");
    assert!(stdout.contains("smoke replay ok"), "verify output: {stdout}");
}

#[test]
fn sweep_emits_the_documented_four_cell_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    // The residual cloud must have numerical rank >= 100 for the m = 100
    // cells to be admissible. At four divisions the rank saturates near 84
    // regardless of how many snapshots are recorded, so this test uses five
    // divisions (372 free dofs), where eight paths of ten steps already give
    // a residual matrix of rank well above 100.
    ok(out, &["--threads", "2", "mesh", "--divisions", "5"]);
    ok(
        out,
        &["--threads", "2", "fom", "run", "--paths", "8", "--steps", "10"],
    );
    let stdout = ok(
        out,
        &[
            "--threads", "2", "sweep", "--d", "9,15", "--m", "50,100", "--method", "lle",
            "--hyper", "lehm",
        ],
    );
    assert!(stdout.contains("4 cell(s)"), "sweep output: {stdout}");

    let accuracy = std::fs::read_to_string(out.join("sweep/accuracy.csv")).unwrap();
    let lines: Vec<&str> = accuracy.lines().collect();
    assert_eq!(lines.len(), 5, "header plus four cells:\n{accuracy}");
    assert!(lines[0].starts_with("method,hyper,d,m,"));
    let mut converged_cells = 0;
    for (d, m) in [(9, 50), (9, 100), (15, 50), (15, 100)] {
        let row = lines[1..]
            .iter()
            .find(|l| l.starts_with(&format!("lle,lehm,{d},{m},")))
            .unwrap_or_else(|| panic!("missing cell d={d} m={m}:\n{accuracy}"));
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 9, "malformed row: {row}");
        let failure = fields[8];
        assert!(failure.is_empty(), "cell d={d} m={m} failed: {failure}");
        if let Ok(err_u) = fields[4].parse::<f64>() {
            assert!(
                err_u.is_finite() && err_u > 0.0 && err_u < 100.0,
                "cell d={d} m={m}: implausible error {err_u}"
            );
            converged_cells += 1;
        }
    }
    assert!(
        converged_cells >= 1,
        "no cell reported a displacement error:\n{accuracy}"
    );
    assert!(out.join("sweep/sweep.csv").is_file());
    assert!(out.join("sweep/sweep.json").is_file());
    assert!(out.join("sweep/pareto.csv").is_file());
}

#[test]
fn seed_resolution_flag_outranks_env_outranks_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    ok(out, &["mesh", "--divisions", "2"]);

    let output = bin()
        .arg("--out")
        .arg(out)
        .env("HYPERROM_SEED", "123")
        .args(["fom", "run", "--paths", "1", "--steps", "1"])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(read_manifest(&out.join("fom")).unwrap().seed, 123);

    let output = bin()
        .arg("--out")
        .arg(out)
        .env("HYPERROM_SEED", "123")
        .args(["--seed", "9", "fom", "run", "--paths", "1", "--steps", "1"])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(read_manifest(&out.join("fom")).unwrap().seed, 9);

    let output = bin()
        .arg("--out")
        .arg(out)
        .env("HYPERROM_SEED", "not a number")
        .args(["fom", "run", "--paths", "1", "--steps", "1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn identical_runs_write_byte_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        ok(out, &["--threads", "2", "mesh", "--divisions", "2"]);
        ok(
            out,
            &["--threads", "2", "fom", "run", "--paths", "2", "--steps", "2"],
        );
    }
    for file in ["mesh/manifest.json", "fom/manifest.json", "fom/snapshots.hrmb", "fom/pbars.hrmb"]
    {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }
}

#[test]
fn corrupted_artifact_fails_verify_with_exit_5() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    ok(out, &["mesh", "--divisions", "2"]);
    ok(out, &["fom", "run", "--paths", "1", "--steps", "1"]);
    ok(out, &["verify"]);

    let path = out.join("fom/snapshots.hrmb");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();

    let err = fails(out, &["verify"], 5);
    assert!(
        err.contains("hash") || err.contains("verification"),
        "stderr should report the corruption: {err}"
    );
}

#[test]
fn stale_upstream_stage_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    ok(out, &["mesh", "--divisions", "2"]);
    ok(out, &["fom", "run", "--paths", "1", "--steps", "1"]);
    // Rebuilding the mesh invalidates the hash recorded by the fom stage.
    ok(out, &["mesh", "--divisions", "3"]);

    let err = fails(out, &["train", "reduce"], 5);
    assert!(err.contains("mesh"), "stderr should name the changed stage: {err}");
    fails(out, &["verify"], 5);
}

#[test]
fn config_file_is_honored_and_typos_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let good = tmp.path().join("good.toml");
    std::fs::write(&good, "seed = 21\n[mesh]\ndivisions = 3\n").unwrap();
    let stdout = ok(
        &out,
        &["--config", good.to_str().unwrap(), "mesh"],
    );
    assert!(stdout.contains("27 elements"), "divisions=3 gives 27 elements: {stdout}");
    assert_eq!(read_manifest(&out.join("mesh")).unwrap().seed, 21);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[paths]\nstepz = 3\n").unwrap();
    let err = fails(&out, &["--config", bad.to_str().unwrap(), "mesh"], 2);
    assert!(err.contains("stepz") || err.contains("unknown"), "stderr: {err}");

    fails(&out, &["--config", "/nonexistent/x.toml", "mesh"], 2);
}

#[test]
fn rom_flags_are_validated_and_budget_controls_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    fails(out, &["rom", "run"], 2);
    fails(out, &["rom", "run", "--galerkin", "--hyper"], 2);
    fails(out, &["rom", "run", "--hyper", "--record-residuals"], 2);

    ok(out, &["--threads", "2", "mesh", "--divisions", "4"]);
    ok(
        out,
        &[
            "--threads", "2", "fom", "run", "--paths", "2", "--train-paths", "2", "--steps", "3",
        ],
    );
    ok(
        out,
        &["--threads", "2", "train", "reduce", "--method", "pod", "--d", "3"],
    );

    // One Newton iteration cannot reach the tolerance on this cell: every
    // step diverges, which exceeds the default budget of zero.
    let err = fails(
        out,
        &["--threads", "2", "rom", "run", "--galerkin", "--max-iter", "1"],
        4,
    );
    assert!(err.contains("divergence budget"), "stderr: {err}");

    // A generous budget turns the same outcome into success.
    ok(
        out,
        &[
            "--threads", "2", "rom", "run", "--galerkin", "--max-iter", "1", "--budget", "100",
        ],
    );
}

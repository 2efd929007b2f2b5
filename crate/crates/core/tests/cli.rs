//! `fmlab` commands end to end: outputs, exit codes, no partial writes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use inverse_fm::{DiscretePlan1D, GaussianPlan};
use serde_json::Value;

fn fmlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("fmlab runs")
}

fn write_input(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: PathBuf) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn forward_translation_plan_has_constant_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(
        dir.path(),
        "plan.json",
        r#"{"plan": {"mu0": [0.0], "mu1": [2.0], "sigma0": [[1.5]], "sigma1": [[1.5]], "cross": [[1.5]]},
            "times": [0.0, 0.5, 1.0]}"#,
    );
    let out = dir.path().join("out");
    let res = fmlab(&["forward", "--input", input.to_str().unwrap()], &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = csv_rows(out.join("marginals.csv"));
    assert_eq!(rows.len(), 3);
    for (row, t) in rows.iter().zip([0.0, 0.5, 1.0]) {
        assert_eq!(row[0], t);
        assert!((row[1] - 2.0 * t).abs() < 1e-15);
        assert!((row[2] - 1.5).abs() < 1e-15);
    }
    let header = std::fs::read_to_string(out.join("marginals.csv")).unwrap();
    assert!(header.starts_with("t,mean_1,cov_1_1\n"));
    assert_eq!(read_json(out.join("summary.json"))["kind"], "gaussian");
}

#[test]
fn forward_independent_identity_plan_halves_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(
        dir.path(),
        "plan.json",
        r#"{"plan": {"mu0": [0.0, 0.0], "mu1": [2.0, 0.0], "sigma0": [[1.0, 0.0], [0.0, 1.0]],
                     "sigma1": [[1.0, 0.0], [0.0, 1.0]], "cross": [[0.0, 0.0], [0.0, 0.0]]}}"#,
    );
    let out = dir.path().join("out");
    let res = fmlab(&["forward", "--input", input.to_str().unwrap(), "--times", "0.5"], &out);
    assert!(res.status.success());
    assert_eq!(csv_rows(out.join("marginals.csv")), vec![vec![0.5, 1.0, 0.0, 0.5, 0.0, 0.0, 0.5]]);
}

#[test]
fn forward_discrete_plan_lists_atoms() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(
        dir.path(),
        "plan.json",
        r#"{"plan": {"x_atoms": [0.0, 1.0], "y_atoms": [1.0, 0.0], "weights": [[0.5, 0.0], [0.0, 0.5]]}, "times": [0.5]}"#,
    );
    let out = dir.path().join("out");
    assert!(fmlab(&["forward", "--input", input.to_str().unwrap()], &out).status.success());
    assert_eq!(csv_rows(out.join("marginals.csv")), vec![vec![0.5, 0.5, 1.0]]);
}

#[test]
fn malformed_or_invalid_input_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let broken = write_input(dir.path(), "broken.json", r#"{"plan": {"mu0": [0.0"#);
    let out = dir.path().join("out");
    let res = fmlab(&["forward", "--input", broken.to_str().unwrap()], &out);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());

    // S = 1.5 with unit variances is not a valid coupling.
    let invalid = write_input(
        dir.path(),
        "invalid.json",
        r#"{"plan": {"mu0": [0.0], "mu1": [0.0], "sigma0": [[1.0]], "sigma1": [[1.0]], "cross": [[1.5]]}, "times": [0.5]}"#,
    );
    let res = fmlab(&["forward", "--input", invalid.to_str().unwrap()], &out);
    assert_eq!(res.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(report["validation"]["accepted"], false);
    assert!(!out.exists());
}

#[test]
fn invert_gaussian_independent_field_gives_zero_cross() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(
        dir.path(),
        "v0.json",
        r#"{"mu0": [1.0, 0.0], "sigma0": [[1.0, 0.2], [0.2, 2.0]], "mu1": [3.0, -1.0], "sigma1": [[1.0, 0.0], [0.0, 1.0]],
            "v0": {"t": 0.0, "a": [[-1.0, 0.0], [0.0, -1.0]], "b": [3.0, -1.0]}}"#,
    );
    let out = dir.path().join("out");
    let res = fmlab(&["invert-gaussian", "--input", input.to_str().unwrap()], &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let plan: GaussianPlan = serde_json::from_value(read_json(out.join("recovered_plan.json"))).unwrap();
    assert_eq!(plan.cross.amax(), 0.0);
    assert_eq!(read_json(out.join("roundtrip.json"))["passed"], true);
}

#[test]
fn invert_gaussian_inconsistent_offset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(
        dir.path(),
        "v0.json",
        r#"{"mu0": [0.0], "sigma0": [[1.0]], "mu1": [3.0], "sigma1": [[1.0]], "v0": {"t": 0.0, "a": [[-0.5]], "b": [2.0]}}"#,
    );
    let out = dir.path().join("out");
    let res = fmlab(&["invert-gaussian", "--input", input.to_str().unwrap()], &out);
    assert_eq!(res.status.code(), Some(3));
    let report: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(report["error"], "InconsistentField");
    assert!(!out.exists());
}

#[test]
fn invert_gaussian_random_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert!(fmlab(&["invert-gaussian", "--dim", "5", "--seed", "3"], &out).status.success());
    let report = read_json(out.join("roundtrip.json"));
    assert!(report["residual"].as_f64().unwrap() <= 1e-10);
    assert!(report["cross_error"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn invert_1d_point_masses_and_certified_instance() {
    let dir = tempfile::tempdir().unwrap();
    let trivial = write_input(
        dir.path(),
        "delta.json",
        r#"{"x_atoms": [0.0], "y_atoms": [1.0], "source_masses": [1.0], "target_masses": [1.0], "snapshots": []}"#,
    );
    let out = dir.path().join("trivial");
    assert!(fmlab(&["invert-1d", "--input", trivial.to_str().unwrap()], &out).status.success());
    let plan: DiscretePlan1D = serde_json::from_value(read_json(out.join("recovered_plan.json"))).unwrap();
    assert_eq!(plan.weights()[(0, 0)], 1.0);

    let out = dir.path().join("random");
    let res = fmlab(&["invert-1d", "--dim", "3", "--seed", "5", "--times", "0.25,0.5,0.75"], &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let truth: DiscretePlan1D = serde_json::from_value(read_json(out.join("true_plan.json"))).unwrap();
    let rec: DiscretePlan1D = serde_json::from_value(read_json(out.join("recovered_plan.json"))).unwrap();
    assert!((rec.weights() - truth.weights()).amax() <= 1e-7);
    assert_eq!(read_json(out.join("certificate.json"))["certificate"]["positive"], true);
    assert_eq!(csv_rows(out.join("residuals.csv")).len(), 3);
}

#[test]
fn invert_1d_without_snapshots_is_ill_posed() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(
        dir.path(),
        "empty.json",
        r#"{"x_atoms": [0.0, 1.0], "y_atoms": [0.0, 1.0], "source_masses": [0.5, 0.5], "target_masses": [0.5, 0.5], "snapshots": []}"#,
    );
    let out = dir.path().join("out");
    let res = fmlab(&["invert-1d", "--input", input.to_str().unwrap()], &out);
    assert_eq!(res.status.code(), Some(4));
    let report: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(report["error"], "IllPosed");
    assert!(report["message"].as_str().unwrap().contains("rank gap 1"));
    assert!(!out.exists());
}

#[test]
fn counterexample_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one");
    let res = fmlab(&["counterexample", "--dim", "1"], &out);
    assert_eq!(res.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(report["error"], "NotApplicableInOneDimension");

    let out = dir.path().join("two");
    assert!(fmlab(&["counterexample"], &out).status.success());
    let pair = read_json(out.join("pair.json"));
    assert!(pair["max_cov_deviation"].as_f64().unwrap() <= 1e-12);
    assert!((pair["cross_difference_frobenius"].as_f64().unwrap() - 2f64.sqrt()).abs() < 1e-15);
    let rows = csv_rows(out.join("agreement.csv"));
    assert_eq!(rows.len(), 101);
    assert!(rows.iter().all(|r| r[1] <= 1e-12 && r[2] <= 1e-12));
}

#[test]
fn transport_check_on_translation_plan() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(
        dir.path(),
        "plan.json",
        r#"{"plan": {"mu0": [0.0, 0.0], "mu1": [1.0, 2.0], "sigma0": [[1.0, 0.5], [0.5, 1.0]],
                     "sigma1": [[1.0, 0.5], [0.5, 1.0]], "cross": [[1.0, 0.5], [0.5, 1.0]]}}"#,
    );
    let out = dir.path().join("out");
    let res = fmlab(
        &["transport-check", "--input", input.to_str().unwrap(), "--particles", "1000", "--steps", "10", "--export-particles"],
        &out,
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = read_json(out.join("moment_check.json"));
    assert_eq!(report["report"]["passed"], true);
    assert_eq!(report["report"]["checks"].as_array().unwrap().len(), 4);
    let particles = std::fs::read_to_string(out.join("particles.csv")).unwrap();
    assert!(particles.starts_with("t,particle_id,x_1,x_2\n"));
    assert_eq!(particles.lines().count(), 1 + 5 * 1000);
}

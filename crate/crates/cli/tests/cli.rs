use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use futilsim_core::datagen::{generate_cohort, select_ia_subset, write_cohort_csv};
use futilsim_core::harness::presets::binary_scenario;
use futilsim_core::ShiftSpec;

fn futilsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_futilsim"))
        .args(args)
        .env_remove("FUTILSIM_WORKERS")
        .output()
        .unwrap()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/determinism.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_three_files_and_seed_override_changes_them() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = futilsim(&["run", "--config", s(&fixture()), "--out", s(&a)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["rows.csv", "aggregates.csv", "result.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let out = futilsim(&["run", "--config", s(&fixture()), "--out", s(&b), "--seed", "8"]);
    assert!(out.status.success());
    assert_ne!(
        std::fs::read(a.join("rows.csv")).unwrap(),
        std::fs::read(b.join("rows.csv")).unwrap()
    );
    let rows = std::fs::read_to_string(a.join("rows.csv")).unwrap();
    // 40 replicates x (1 benchmark + 2 shifts x 2 fractions) x 2 estimators x 2 rules
    assert_eq!(rows.lines().count(), 1 + 40 * 5 * 2 * 2);
}

#[test]
fn workers_env_var_is_a_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_futilsim"))
        .args(["run", "--config", s(&fixture()), "--out", s(dir.path())])
        .env("FUTILSIM_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_futilsim"))
        .args(["run", "--config", s(&fixture()), "--out", s(dir.path())])
        .env("FUTILSIM_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = futilsim(&["run", "--config", "/nonexistent.json", "--out", s(dir.path())]);
    assert_eq!(missing.status.code(), Some(1));

    let text = std::fs::read_to_string(fixture()).unwrap();
    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, text.replace("\"replicates\"", "\"replicatez\"")).unwrap();
    let out = futilsim(&["run", "--config", s(&typo), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replicatez"));

    let zero = dir.path().join("zero.json");
    std::fs::write(&zero, text.replace("\"replicates\": 40", "\"replicates\": 0")).unwrap();
    assert_eq!(futilsim(&["run", "--config", s(&zero), "--out", s(dir.path())]).status.code(), Some(1));

    assert_eq!(futilsim(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(futilsim(&["reproduce", "fig3", "--out", s(dir.path())]).status.code(), Some(1));
    assert_eq!(futilsim(&["--help"]).status.code(), Some(0));
}

#[test]
fn unwritable_output_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = futilsim(&["run", "--config", s(&fixture()), "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tune_cutoff_rejects_binary_designs() {
    let out = futilsim(&["tune-cutoff", "--config", s(&fixture()), "--grid", "0,10"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn screen_reads_a_cohort_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_cohort(&binary_scenario().validate().unwrap(), 11);
    let ia = select_ia_subset(&cohort, &ShiftSpec::new(vec![0.8, 0.2])).unwrap();
    let path = dir.path().join("cohort.csv");
    let file = std::fs::File::create(&path).unwrap();
    let mut records = cohort.annotated(&ia, None);
    for r in &mut records {
        r.baseline_available = true;
    }
    write_cohort_csv(&records, file).unwrap();
    let out = futilsim(&[
        "screen", "--data", s(&path), "--ia-col", "in_ia", "--vars", "subgroup,site", "--b", "199", "--alpha",
        "0.05", "--out", s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["selected"], serde_json::json!(["subgroup"]));
    assert_eq!(report["results"][0]["B"], 199);
    assert!(dir.path().join("screen.json").exists());

    let out = futilsim(&["screen", "--data", s(&path), "--vars", "region"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reproduce_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = futilsim(&["reproduce", "fig1", "--out", s(dir.path()), "--replicates", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fig1.json")).unwrap()).unwrap();
    assert_eq!(side["replicates"], 20);
    assert_eq!(side["figure"], "fig1");

    let out = futilsim(&["curves", "shrinkage", "--out", s(dir.path())]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("shrinkage_vs_tau2.csv")).unwrap();
    assert!(text.starts_with("tau2,sigma2,n,weight\n"));
}

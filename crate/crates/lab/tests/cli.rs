use std::process::Command;

fn dpgeo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpgeo"))
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let out = dpgeo().args(["run", "no-such-preset"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_override_is_a_usage_error() {
    let out = dpgeo().args(["run", "lq-scalar", "--set", "not_a_param=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_run_writes_artifacts_under_env_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dpgeo()
        .args(["check", "building-block-curvature", "--set", "samples=500"])
        .env("DPGEO_OUTPUT_DIR", tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
    let dir = tmp.path().join("building-block-curvature");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["experiment"], "building-block-curvature");
    assert_eq!(summary["all_checks_pass"], true);
    assert!(dir.join("sweep.csv").is_file());
}

#[test]
fn failing_check_exits_one_only_in_check_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["lq-scalar", "--set", "deltas=[0.025,0.2]", "--set", "epsilons=[0.08,0.2]", "--set", "strip.cells=[4,256]"];
    let run = |mode: &str| {
        dpgeo().arg(mode).args(args).env("DPGEO_OUTPUT_DIR", tmp.path()).output().unwrap().status.code()
    };
    assert_eq!(run("run"), Some(0));
    assert_eq!(run("check"), Some(1));
}

#[test]
fn describe_round_trips_through_config() {
    let out = dpgeo().args(["describe", "taxicab"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = dpgeo::ExperimentConfig::from_toml_str(&text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.experiment, "taxicab");
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn covsteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covsteer")).args(args).env_remove("COVSTEER_BACKEND").output().unwrap()
}

fn run(args: &[&str]) -> Output {
    let out = covsteer(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn propagate_writes_every_time_slice() {
    let dir = tempfile::tempdir().unwrap();
    run(&["propagate", "--model", s(&data("benchmark.json")), "--out", s(dir.path())]);
    let t = json(dir.path().join("trajectories.json"));
    assert_eq!(t["sigma"].as_array().unwrap().len(), 7);
    assert_eq!(t["s"].as_array().unwrap().len(), 7);
    let m = json(dir.path().join("manifest_propagate.json"));
    for name in ["trajectories.json", "moments.csv", "totals.csv", "cost.json"] {
        assert_eq!(m["artifacts"][name].as_str().unwrap().len(), 64, "{name}");
    }
}

#[test]
fn identity_chain_keeps_mode_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = json(data("benchmark_unconstrained.json"));
    model["transition"] = serde_json::json!([[1.0, 0.0], [0.0, 1.0]]);
    let path = dir.path().join("frozen.json");
    fs::write(&path, model.to_string()).unwrap();
    run(&["propagate", "--model", s(&path), "--out", s(dir.path())]);
    let rho = json(dir.path().join("trajectories.json"))["rho"].clone();
    for r in rho.as_array().unwrap() {
        assert_eq!(r, &serde_json::json!([0.3, 0.7]));
    }
}

#[test]
fn missing_model_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = covsteer(&["propagate", "--model", "no/such/model.json", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/model.json"));
}

#[test]
fn solve_montecarlo_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let model = data("benchmark.json");
    run(&["solve", "--model", s(&model), "--out", out, "--tol", "1e-6", "--alpha", "100", "--eta", "1.5"]);
    let sol = json(dir.path().join("solution.json"));
    assert_eq!(sol["status"], "converged");
    assert_eq!(sol["pipeline"], "refinement");
    assert!(sol["iterations"].as_u64().unwrap() <= 15);
    assert!(json(dir.path().join("losslessness.json"))["passed"].as_bool().unwrap());
    assert_eq!(fs::read_to_string(dir.path().join("run_log.jsonl")).unwrap().lines().count() as u64, sol["iterations"].as_u64().unwrap());

    run(&["montecarlo", "--model", s(&model), "--out", out, "--samples", "2500", "--seed", "3"]);
    let rep = json(dir.path().join("mc_report.json"));
    assert!(rep["violations"]["state_trajectory"].as_f64().unwrap() <= 0.05);
    let first = fs::read(dir.path().join("mc_report.json")).unwrap();
    run(&["montecarlo", "--model", s(&model), "--out", out, "--samples", "2500", "--seed", "3"]);
    assert_eq!(first, fs::read(dir.path().join("mc_report.json")).unwrap());

    run(&["report", "--out", out]);
    let svg = fs::read_to_string(dir.path().join("state_fan.svg")).unwrap();
    assert!(svg.contains("<polygon") && svg.contains("fill-opacity=\"0.35\""));
    let figures: Vec<Vec<u8>> =
        ["state_fan.svg", "control_norms.svg", "terminal.svg"].iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    run(&["report", "--out", out]);
    for (f, before) in ["state_fan.svg", "control_norms.svg", "terminal.svg"].iter().zip(figures) {
        assert_eq!(before, fs::read(dir.path().join(f)).unwrap(), "{f}");
    }
    let env = fs::read_to_string(dir.path().join("plot_control_envelope.csv")).unwrap();
    assert_eq!(env.lines().count(), 1 + 6 * 2);
}

#[test]
fn solve_checksums_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        run(&["solve", "--model", s(&data("benchmark.json")), "--out", s(d.path())]);
    }
    let ma = json(a.path().join("manifest_solve.json"));
    let mb = json(b.path().join("manifest_solve.json"));
    assert_eq!(ma["artifacts"], mb["artifacts"]);
}

#[test]
fn unconstrained_model_is_solved_in_one_pass() {
    let dir = tempfile::tempdir().unwrap();
    run(&["solve", "--model", s(&data("benchmark_unconstrained.json")), "--out", s(dir.path())]);
    let sol = json(dir.path().join("solution.json"));
    assert_eq!(sol["pipeline"], "two_step");
    assert_eq!(sol["iterations"], 1);
}

#[test]
fn excluded_target_exits_with_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let out = covsteer(&["solve", "--model", s(&data("benchmark_infeasible.json")), "--out", s(dir.path()), "--max-iter", "12"]);
    assert_eq!(out.status.code(), Some(4));
    let sol = json(dir.path().join("solution.json"));
    assert_eq!(sol["status"], "max_iterations");
    let history = sol["slack_history"].as_array().unwrap();
    assert_eq!(history.len(), 12);
    assert_eq!(json(dir.path().join("manifest_solve.json"))["status"], "max_iterations");
}

#[test]
fn single_sample_report_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    run(&["propagate", "--model", s(&data("benchmark.json")), "--out", out]);
    let zero = dir.path().join("zero_policy.json");
    fs::write(&zero, covsteer::Policy::zero(&covsteer::benchmark::two_mode_model()).to_json()).unwrap();
    run(&["montecarlo", "--model", s(&data("benchmark.json")), "--policy", s(&zero), "--out", out, "--samples", "1"]);
    let rep = json(dir.path().join("mc_report.json"));
    assert_eq!(rep["moments"]["insufficient"], true);
}

#[test]
fn mismatched_policy_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = covsteer::benchmark::two_mode_model();
    m.horizon = 4;
    let policy = dir.path().join("short.json");
    fs::write(&policy, covsteer::Policy::zero(&m).to_json()).unwrap();
    let out = covsteer(&["montecarlo", "--model", s(&data("benchmark.json")), "--policy", s(&policy), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn report_on_empty_directory_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(covsteer(&["report", "--out", s(dir.path())]).status.code(), Some(2));
}

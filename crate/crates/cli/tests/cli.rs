use std::fs;
use std::process::{Command, Output};

use tempfile::tempdir;

fn feedint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feedint")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn run_from_flags_writes_trace() {
    let dir = tempdir().unwrap();
    let out_path = dir.path().join("k.csv");
    let out = feedint(&[
        "run", "--system", "kepler", "--method", "feedback_euler", "--t-end", "1", "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max dL"));
    let text = fs::read_to_string(&out_path).unwrap();
    assert!(text.starts_with("t,x1,x2,x3,v1,v2,v3,V,dL,dA,dE\n"));
    assert_eq!(text.lines().count(), 1 + 1 + 200);
}

#[test]
fn flags_override_config_file() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("rb.cfg");
    let trace = dir.path().join("rb.csv");
    fs::write(
        &cfg,
        format!(
            "[run]\nsystem = rigid_body\nmethod = feedback_euler\nh = 1e-4\nt_end = 50\noutput = {}\n\n[gains]\nk0 = 50\nk1 = 100\nk2 = 50\n",
            dir.path().join("unused.csv").display()
        ),
    )
    .unwrap();
    let out = feedint(&[
        "run", "--config", cfg.to_str().unwrap(), "--t-end", "0.01", "--h", "1e-3", "--gains", "k0=10,k2=20",
        "--out", trace.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(trace.exists());
    assert!(!dir.path().join("unused.csv").exists());
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 1 + 11);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempdir().unwrap();
    let out_path = dir.path().join("x.csv");
    let out_str = out_path.to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--system", "kepler", "--method", "splitting", "--t-end", "1", "--out", out_str],
        vec!["run", "--system", "kepler", "--method", "nope", "--t-end", "1", "--out", out_str],
        vec!["run", "--system", "kepler", "--method", "rk4", "--out", out_str],
        vec!["run", "--system", "kepler", "--method", "rk4", "--t-end", "1", "--h", "-1", "--out", out_str],
        vec!["run", "--system", "kepler", "--method", "rk4", "--t-end", "1", "--gains", "k1", "--out", out_str],
        vec!["run", "--config", "/nonexistent/run.cfg"],
        vec!["figure", "--id", "F2", "--scale", "0.01", "--out-dir", out_str],
        vec!["figure", "--id", "F42", "--scale", "0.5", "--out-dir", out_str],
        vec!["check", "--system", "pendulum"],
    ];
    for args in cases {
        let out = feedint(&args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!out_path.exists());
}

#[test]
fn malformed_config_file_exits_with_2() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[run]\nsystem = kepler\nthis line has no equals sign\n").unwrap();
    let out = feedint(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn divergence_exits_with_3_and_keeps_partial_trace() {
    let dir = tempdir().unwrap();
    let out_path = dir.path().join("blow.csv");
    let out = feedint(&[
        "run", "--system", "rigid_body", "--method", "feedback_euler", "--h", "0.2", "--t-end", "100", "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("partial run"));
    assert!(fs::read_to_string(&out_path).unwrap().lines().count() > 1);
}

#[test]
fn check_passes_for_standard_setups() {
    for system in ["rigid_body", "kepler", "perturbed_kepler"] {
        let out = feedint(&["check", "--system", system]);
        assert_eq!(code(&out), 0, "{system}: {}", String::from_utf8_lossy(&out.stdout));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.lines().all(|l| l.starts_with("[PASS]")), "{stdout}");
    }
}

#[test]
fn figure_writes_one_csv_per_curve() {
    let dir = tempdir().unwrap();
    let out = feedint(&["figure", "--id", "f9", "--scale", "0.2", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["f9_feedback_euler.csv", "f9_projection_euler.csv", "f9_rk4.csv", "f9_stormer_verlet_a.csv"]
    );
}

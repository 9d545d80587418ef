//! End-to-end runs of the `pucci-kac` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pucci_kac::config::{parse_config, to_canonical_toml};

const BIN: &str = env!("CARGO_BIN_EXE_pucci-kac");

fn write_config(dir: &Path, name: &str, solver: &str, problem: &str) -> std::path::PathBuf {
    let out = dir.join(format!("{name}-out"));
    let text = format!(
        "[problem]\n{problem}\n\n[solver]\n{solver}\noutput = \"{}\"\n",
        out.display()
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

const CASE_A: &str = "dim = 2\nlam = 1.0\nLam = 2.0\nf = \"1\"\ng = \"0\"\ndomain = \"ball\"\ncenter = [0.0, 0.0]\nradius = 1.0";

fn solve(args: &[&str]) -> Output {
    Command::new(BIN).arg("solve").args(args).env_remove("PUCCI_KAC_THREADS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn print_defaults_is_a_loadable_config() {
    let o = solve(&["--print-defaults"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let (spec, cfg) = parse_config(&text).unwrap();
    // canonical form survives a second trip
    let again = parse_config(&to_canonical_toml(&spec, &cfg)).unwrap();
    assert_eq!(to_canonical_toml(&again.0, &again.1), to_canonical_toml(&spec, &cfg));
}

#[test]
fn grid_run_writes_outputs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "dpp",
        "kind = \"dpp_grid\"\nh = 0.05\nseed = 3\neval_points = [[0.0, 0.0], [0.5, 0.1]]",
        CASE_A,
    );
    let out = dir.path().join("dpp-out");
    let first = solve(&[cfg.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let values_1 = fs::read(out.join("values.csv")).unwrap();
    assert!(out.join("grid.csv").exists());
    assert!(out.join("report.txt").exists());

    let second = solve(&[cfg.to_str().unwrap(), "--threads", "3"]);
    assert_eq!(code(&second), 0);
    assert_eq!(values_1, fs::read(out.join("values.csv")).unwrap());

    // the env var is the fallback thread count
    let third = Command::new(BIN)
        .args(["solve", cfg.to_str().unwrap()])
        .env("PUCCI_KAC_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&third), 0);
    assert_eq!(values_1, fs::read(out.join("values.csv")).unwrap());

    let text = String::from_utf8(values_1).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,x2,estimate,stderr,solver,seed"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 6);
    let estimate: f64 = row[2].parse().unwrap();
    assert!((estimate - 0.5).abs() <= 0.01);
    assert_eq!(row[4], "dpp_grid");
    assert!(!text.contains('\r'));
}

#[test]
fn monte_carlo_run_matches_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let problem = CASE_A.replace("Lam = 2.0", "Lam = 1.0");
    let cfg = write_config(dir.path(), "mc", "kind = \"mc_fixed_control\"\ndt = 0.001\nn_paths = 4000\nseed = 9", &problem);
    let o = solve(&[cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("mc-out/values.csv")).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').take(4).map(|v| v.parse().unwrap()).collect();
    assert!((row[2] - 0.5).abs() <= 3.0 * row[3] + 0.005);
}

#[test]
fn cross_check_reports_both_solvers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cc", "kind = \"cross_check\"\nh = 0.05", CASE_A);
    let o = solve(&[cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("cc-out");
    assert!(out.join("grid.csv").exists() && out.join("grid_fd.csv").exists());
    let values = fs::read_to_string(out.join("values.csv")).unwrap();
    assert!(values.contains("dpp_grid") && values.contains("fd_oracle"));
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad", "kind = \"dpp_grid\"", &CASE_A.replace("lam = 1.0", "lam = 3.0"));
    let o = solve(&[bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lam") && err.contains("Lam"), "{err}");

    let unknown_var = write_config(dir.path(), "var", "kind = \"dpp_grid\"", &CASE_A.replace("f = \"1\"", "f = \"x3\""));
    assert_eq!(code(&solve(&[unknown_var.to_str().unwrap()])), 1);

    assert_eq!(code(&solve(&[dir.path().join("missing.toml").to_str().unwrap()])), 1);

    let good = write_config(dir.path(), "good", "kind = \"dpp_grid\"\nh = 0.1", CASE_A);
    assert_eq!(code(&solve(&[good.to_str().unwrap(), "--study", "bogus=1,2"])), 1);
}

#[test]
fn non_convergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "stuck",
        "kind = \"dpp_grid\"\nh = 0.05\nmethod = \"value_iteration\"\nmax_iter = 3",
        CASE_A,
    );
    let o = solve(&[cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    // results are still written
    assert!(dir.path().join("stuck-out/values.csv").exists());
}

#[test]
fn all_censored_paths_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "censored",
        "kind = \"mc_fixed_control\"\ndt = 0.001\nmax_time = 0.002\nn_paths = 100",
        CASE_A,
    );
    assert_eq!(code(&solve(&[cfg.to_str().unwrap()])), 2);
}

#[test]
fn study_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "study", "kind = \"fd_oracle\"", CASE_A);
    let o = solve(&[cfg.to_str().unwrap(), "--study", "h=0.2,0.1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("study-out/study.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("knob,value,solver,estimate,stderr,error,order"));
    assert_eq!(lines.count(), 2);
}

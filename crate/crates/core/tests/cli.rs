//! End-to-end checks of the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biharm_nodal::config::{parse_config, RunConfig};
use biharm_nodal::export;
use biharm_nodal::run::{exit, read_summary};

const BIN: &str = env!("CARGO_BIN_EXE_biharm-nodal");

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.conf")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_config(dir: &Path, n: usize) -> PathBuf {
    let text = fs::read_to_string(fixture())
        .unwrap()
        .replace("n_nodes = 400", &format!("n_nodes = {n}"))
        .replace("positivity_loads = 100", "positivity_loads = 5")
        .replace("dual_sign_samples = 50", "dual_sign_samples = 5")
        .replace("invariance_probes = 4", "invariance_probes = 1");
    let path = dir.join("small.conf");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fixture_parses_to_reference() {
    let cfg = parse_config(&fs::read_to_string(fixture()).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::reference());
    let out = run(&["--config", s(&fixture()), "print-config"]);
    assert_eq!(code(&out), exit::SUCCESS);
    let printed = parse_config(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(printed, cfg);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(fixture()).unwrap();
    for (from, to, needle) in [
        ("term = 2 constant 1", "term = 9 constant 1", "2_* - 2"),
        ("dim_n = 5", "dim_n = 4", "dimension 4"),
        ("shrink = 0.5", "shrink = 1.5", "shrink"),
    ] {
        let path = dir.path().join("bad.conf");
        fs::write(&path, base.replace(from, to)).unwrap();
        let out = run(&["--config", s(&path), "solve"]);
        assert_eq!(code(&out), exit::CONFIG, "{to}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.contains(needle), "{err}");
    }
    let out = run(&["--config", s(&dir.path().join("missing.conf")), "solve"]);
    assert_eq!(code(&out), exit::OTHER);
}

#[test]
fn step_budget_exhaustion_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 100);
    let text = fs::read_to_string(&cfg).unwrap().replace("max_steps = 20000", "max_steps = 1");
    fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["--config", s(&cfg), "--out", s(&out_dir), "solve"]);
    assert_eq!(code(&out), exit::BUDGET);
    let summary = read_summary(&out_dir.join("summary.json")).unwrap();
    assert_eq!(summary.exit_code, exit::BUDGET);
    assert!(summary.failure.is_some());
}

#[test]
fn solve_is_deterministic_and_summary_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 120);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = run(&["--config", s(&cfg), "--out", s(&a), "solve"]);
    let ob = run(&["--config", s(&cfg), "--out", s(&b), "solve"]);
    assert_eq!(code(&oa), code(&ob));
    let summary = read_summary(&a.join("summary.json")).unwrap();
    assert_eq!(summary.exit_code, code(&oa));
    assert_eq!(summary.solutions.len(), 3, "{:?}", summary.failure);
    for name in [
        "solution_positive.csv",
        "solution_negative.csv",
        "solution_nodal.csv",
        "trajectory_positive.csv",
        "trajectory_nodal.csv",
        "plot_nodal.dat",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    // summaries differ only in the output directory they record
    let sa = fs::read_to_string(a.join("summary.json")).unwrap();
    let sb = fs::read_to_string(b.join("summary.json")).unwrap();
    assert_eq!(sa.replace(s(&a), "OUT"), sb.replace(s(&b), "OUT"));
    // JSON round trip
    let again = serde_json::to_string_pretty(&summary).unwrap() + "\n";
    assert_eq!(again, sa);
    assert!(a.join("timings.json").exists());
    for rec in &summary.solutions {
        assert!(rec.fixed_point_residual <= 1e-6);
        assert!(a.join(&rec.solution_file).exists());
    }
}

#[test]
fn flow_and_project_on_exported_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path(), 80);
    let cfg = parse_config(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let problem = biharm_nodal::run::build_problem(&cfg).unwrap();
    let u = problem.grid.sample(|r| 2.0 * (-(r - 4.0).powi(2) / 4.0).exp() - (-(r - 9.0).powi(2) / 4.0).exp());
    let input = dir.path().join("u.csv");
    export::write_solution_csv(&input, &problem.grid, &problem.structure, &u).unwrap();
    let out_dir = dir.path().join("o");

    let out = run(&["--config", s(&cfg_path), "--out", s(&out_dir), "flow", "--input", s(&input)]);
    assert_eq!(code(&out), exit::SUCCESS, "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with(export::TRAJECTORY_HEADER));
    let energies: Vec<f64> = traj
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(energies.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
    let terminal = export::read_field_csv(&out_dir.join("terminal.csv")).unwrap();
    assert_eq!(terminal.radii, problem.grid.radii());

    let out = run(&["--config", s(&cfg_path), "--out", s(&out_dir), "project", "--input", s(&input)]);
    assert_eq!(code(&out), exit::SUCCESS);
    let split: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("split.json")).unwrap()).unwrap();
    assert_eq!(split["certified"], serde_json::Value::Bool(true));
    let csv = fs::read_to_string(out_dir.join("split.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[2] >= 0.0);
        assert!((v[2] + v[3] - v[1]).abs() <= 4.0 * f64::EPSILON * v[1].abs().max(v[2].abs()));
    }

    let other = dir.path().join("wrong.csv");
    fs::write(&other, "r,u\n1,2\n").unwrap();
    let out = run(&["--config", s(&cfg_path), "--out", s(&out_dir), "flow", "--input", s(&other)]);
    assert_ne!(code(&out), exit::SUCCESS);
}

#[test]
fn oracle_and_linear_check_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let out = run(&["--out", s(&out_dir), "oracle", "--n", "8", "--samples", "30"]);
    assert_eq!(code(&out), exit::SUCCESS);
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(rep["mismatches"], 0);

    let cfg = small_config(dir.path(), 100);
    let out = run(&["--config", s(&cfg), "--out", s(&out_dir), "linear-check", "--loads", "10"]);
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("linear_check.json")).unwrap()).unwrap();
    assert_eq!(rep["loads"], 10);
    let failures = rep["failures"].as_u64().unwrap();
    let expected = if failures == 0 { exit::SUCCESS } else { exit::VERIFICATION };
    assert_eq!(code(&out), expected);
}

#[test]
fn seed_flag_changes_only_the_seed() {
    let out = run(&["--seed", "42", "print-config"]);
    let cfg = parse_config(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let mut want = RunConfig::reference();
    want.monitors.seed = 42;
    assert_eq!(cfg, want);
}

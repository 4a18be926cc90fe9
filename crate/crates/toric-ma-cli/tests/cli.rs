//! End-to-end tests of the binary: exit codes, golden outputs, and
//! byte-determinism of the CSV reports.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const P1: &str = r#"{"polytope": {"dim": 1, "halfspaces": [{"normal": [1], "offset": 1}, {"normal": [-1], "offset": 1}], "name": "p1"}}"#;
const UNIT: &str = r#"{"polytope": {"dim": 1, "halfspaces": [{"normal": [1], "offset": 1}, {"normal": [-1], "offset": 0}]}}"#;
const P1_SMOOTH: &str = r#"{"polytope": {"dim": 1, "halfspaces": [{"normal": [1], "offset": 1}, {"normal": [-1], "offset": 1}]}, "potential": {"slopes": [[-1], [1]], "coeffs": [1.0, 1.0], "sharpness": 2.0}}"#;
const P1_ATOMS: &str = r#"{"polytope": {"dim": 1, "halfspaces": [{"normal": [1], "offset": 1}, {"normal": [-1], "offset": 1}]}, "atoms": [{"x": [-0.7], "mass": 0.25}, {"x": [0.1], "mass": 0.5}, {"x": [1.3], "mass": 0.25}]}"#;

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("toric-ma-cli-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn input(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("problem.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toric-ma")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn json(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&read(dir, name)).unwrap()
}

#[test]
fn help_lists_subcommands_and_flags() {
    let top = run_ok(&["--help"]);
    let text = String::from_utf8_lossy(&top.stdout).to_string();
    for sub in [
        "polytope-info",
        "futaki",
        "soliton-field",
        "soliton",
        "transport",
        "balanced",
        "bergman",
        "spectral",
        "energy-probe",
    ] {
        assert!(text.contains(sub), "missing subcommand {sub} in:\n{text}");
    }
    let sub = run_ok(&["transport", "--help"]);
    let text = String::from_utf8_lossy(&sub.stdout).to_string();
    for flag in [
        "--input", "--out", "--k", "--k-max", "--tol", "--steps", "--seed", "--xi", "--g",
        "--random-atoms", "--mode",
    ] {
        assert!(text.contains(flag), "missing flag {flag} in:\n{text}");
    }
}

#[test]
fn polytope_info_golden_interval() {
    let dir = workdir("info");
    let inp = input(&dir, P1);
    run_ok(&[
        "polytope-info",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--k-max",
        "4",
    ]);
    assert_eq!(read(&dir, "nk_table.csv"), "k,n_k\n1,3\n2,5\n3,7\n4,9\n");
    let info = json(&dir, "polytope_info.json");
    assert_eq!(info["volume"], 2.0);
    assert_eq!(info["dim"], 1);
    assert_eq!(info["barycenter"][0], 0.0);
    assert_eq!(info["reflexive"], true);
}

#[test]
fn spectral_golden_p1_level_two() {
    let dir = workdir("spectral");
    let inp = input(&dir, P1);
    run_ok(&[
        "spectral",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--k",
        "2",
    ]);
    assert_eq!(read(&dir, "spectral.csv"), "x0,mass\n-1,0.2\n-0.5,0.2\n0,0.2\n0.5,0.2\n1,0.2\n");
    let report = json(&dir, "spectral.json");
    assert_eq!(report["n_k"], 5);
    // Second moment of nu_2 is (k+1)/(3k) = 1/2.
    let m2 = report["moments"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["moment"] == serde_json::json!([2]))
        .unwrap();
    assert!((m2["quantized"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    assert!((m2["continuum"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn futaki_closed_form_unit_interval() {
    let dir = workdir("futaki");
    let inp = input(&dir, UNIT);
    run_ok(&[
        "futaki",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--k-max",
        "6",
    ]);
    let report = json(&dir, "futaki.json");
    let dir0 = &report["directions"][0];
    assert!((dir0["continuum"].as_f64().unwrap() + 0.5).abs() < 1e-9);
    let csv = read(&dir, "futaki_samples.csv");
    assert_eq!(csv.lines().count(), 7);
    // Fut_k / k^2 = -(k+1)/(2k): the k=1 row is exactly -1.
    assert_eq!(csv.lines().nth(1).unwrap(), "0,1,-1");
}

#[test]
fn transport_runs_and_is_deterministic() {
    let dir_a = workdir("transport-a");
    let dir_b = workdir("transport-b");
    let inp = input(&dir_a, P1);
    for dir in [&dir_a, &dir_b] {
        run_ok(&[
            "transport",
            "--input",
            inp.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--random-atoms",
            "6",
            "--seed",
            "7",
        ]);
    }
    let a = read(&dir_a, "transport_solution.csv");
    let b = read(&dir_b, "transport_solution.csv");
    assert_eq!(a, b);
    assert_eq!(read(&dir_a, "transport.json"), read(&dir_b, "transport.json"));
    assert_eq!(a.lines().count(), 7);
    let report = json(&dir_a, "transport.json");
    assert!(report["residual"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn transport_reads_atoms_from_file() {
    let dir = workdir("transport-file");
    let inp = input(&dir, P1_ATOMS);
    run_ok(&[
        "transport",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    let csv = read(&dir, "transport_solution.csv");
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().next().unwrap().starts_with("atom,x0,mass,intercept,cell_mass"));
}

#[test]
fn balanced_converges_on_p1() {
    let dir = workdir("balanced");
    let inp = input(&dir, P1);
    run_ok(&[
        "balanced",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--k",
        "4",
    ]);
    let report = json(&dir, "balanced.json");
    assert_eq!(report["balanced"], true);
    assert!(report["final_residual"].as_f64().unwrap() <= 1e-10);
    // Header plus one row per basis entry.
    assert_eq!(read(&dir, "balanced_weights.csv").lines().count(), 10);
}

#[test]
fn bergman_trace_matches_lattice_sum() {
    let dir = workdir("bergman");
    let inp = input(&dir, P1_SMOOTH);
    run_ok(&[
        "bergman",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--k",
        "3",
        "--g",
        "exp:0.3",
    ]);
    let report = json(&dir, "bergman.json");
    let trace = report["trace"].as_f64().unwrap();
    let expected = report["g_lattice_sum"].as_f64().unwrap();
    assert!((trace - expected).abs() <= 1e-10 * expected.abs());
    let csv = read(&dir, "bergman_density.csv");
    assert_eq!(csv.lines().next().unwrap(), "x0,bergman_normalized,ma_density");
    assert_eq!(csv.lines().count(), 202);
}

#[test]
fn energy_probe_ladder_approaches_continuum() {
    let dir = workdir("energy");
    let inp = input(&dir, P1_SMOOTH);
    run_ok(&[
        "energy-probe",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--k-max",
        "6",
    ]);
    let csv = read(&dir, "energy_probe.csv");
    assert_eq!(csv.lines().count(), 7);
    let deviations: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .collect();
    assert!(deviations.last().unwrap() < &deviations[0]);
    let report = json(&dir, "energy_probe.json");
    assert!(report["energy"].as_f64().is_some());
    // M >= D on a smooth potential.
    let d = report["ding"]["value"].as_f64().unwrap();
    let m = report["mabuchi"]["value"].as_f64().unwrap();
    assert!(m >= d - 1e-9, "mabuchi {m} < ding {d}");
}

#[test]
fn soliton_field_symmetric_interval_is_zero() {
    let dir = workdir("field");
    let inp = input(&dir, P1);
    run_ok(&[
        "soliton-field",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    let report = json(&dir, "soliton_field.json");
    assert_eq!(report["xi"][0].as_f64().unwrap(), 0.0);
    assert!(report["grad_norm"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn soliton_pipeline_p1_within_a_minute() {
    let dir = workdir("soliton");
    let inp = input(&dir, P1);
    let start = Instant::now();
    run_ok(&[
        "soliton",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    // Generous wall-clock guard against hangs; the run shares cores with
    // the rest of the suite.
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "pipeline took {elapsed:.1} s");
    let report = json(&dir, "soliton.json");
    assert_eq!(report["xi"][0].as_f64().unwrap(), 0.0);
    assert_eq!(report["picard"]["converged"], true);
    assert_eq!(report["picard"]["boundary_pinned"], false);
    assert!(report["picard"]["sup_vs_fs"].as_f64().unwrap() <= 5e-2);
    // Ladder levels 4, 8, 16, each balanced to the quantized tolerance.
    let levels = report["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 3);
    for l in levels {
        assert!(l["balanced_residual"].as_f64().unwrap() <= 1e-10);
    }
    let fs_res: Vec<f64> =
        levels.iter().map(|l| l["fs_soliton_residual"].as_f64().unwrap()).collect();
    assert!(fs_res[2] < fs_res[0]);
    assert!(fs_res[2] < 1e-2);
}

#[test]
fn soliton_with_wrong_field_exits_nonconvergent() {
    let dir = workdir("soliton-wrong");
    let inp = input(&dir, P1);
    let out = run(&[
        "soliton",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--k-max",
        "4",
        "--xi",
        "0.8",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_json_exits_two_with_line_info() {
    let dir = workdir("badjson");
    let path = dir.join("broken.json");
    std::fs::write(&path, "{\"polytope\": {\n  \"dim\": oops\n}}").unwrap();
    let out = run(&[
        "polytope-info",
        "--input",
        path.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "stderr: {err}");
}

#[test]
fn capacity_guard_exits_four() {
    let dir = workdir("capacity");
    let inp = input(&dir, P1);
    let out = run(&[
        "transport",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--random-atoms",
        "4001",
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn nonconvergence_exits_three() {
    let dir = workdir("nonconv");
    let inp = input(&dir, P1);
    // One fixed-point step cannot balance the ones start at k = 4.
    let out = run(&[
        "balanced",
        "--input",
        inp.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--k",
        "4",
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir, "balanced.json");
    assert_eq!(report["balanced"], false);
}

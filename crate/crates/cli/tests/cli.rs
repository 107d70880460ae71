use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn angdroop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_angdroop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = angdroop(args);
    assert!(
        out.status.success(),
        "angdroop {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn metrics(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn lists_builtin_scenarios() {
    let out = run_ok(&["list-scenarios"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["testcase1", "testcase2", "reduced_ring", "linearized_path"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn testcase1_settles_all_converter_frequencies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tc1");
    run_ok(&["run", "--scenario", "testcase1", "--out", out.to_str().unwrap()]);
    let m = metrics(&out);
    let per = m["freq_error_final_per_converter"].as_array().unwrap();
    assert_eq!(per.len(), 3);
    for e in per {
        assert!(e.as_f64().unwrap() < 1e-2, "{m}");
    }
    assert!(m["freq_error_final"].as_f64().unwrap() < 1e-2);
    let settle = m["settle_time_s"].as_f64().expect("settled");
    assert!(settle < 1.0);

    let (header, rows) = csv_rows(&out.join("traj_converter.csv"));
    let expected = [
        "t", "theta_1", "theta_2", "theta_3", "freq_1", "freq_2", "freq_3", "v_dc_1", "v_dc_2",
        "v_dc_3", "P_hat_1", "P_hat_2", "P_hat_3",
    ];
    assert_eq!(header, expected);
    let last = rows.last().unwrap();
    for k in 0..3 {
        assert!((last[4 + k] - 2.0 * std::f64::consts::PI * 50.0).abs() < 1e-2);
    }
    // The load step moves converter 1's angle offset, which then recovers.
    let ev = &m["events"][0];
    assert!(ev["offset_shift"][0].as_f64().unwrap().abs() > 1e-4);
    let before = ev["offset_before"][0].as_f64().unwrap();
    let after = m["angle_offset_final"][0].as_f64().unwrap();
    assert!((after - before).abs() < 1e-3);
}

#[test]
fn testcase2_coherence_table_scales_as_expected() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["run", "--scenario", "testcase2", "--out", dir.path().to_str().unwrap()]);
    let (header, rows) = csv_rows(&dir.path().join("coherence.csv"));
    assert_eq!(
        header,
        ["n", "lambda2", "coherence_angular", "coherence_frequency", "bound_alpha_over_gamma"]
    );
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0]), (10.0, 100.0));
    assert!(rows[1][3] > rows[0][3], "frequency column grows");
    for r in &rows {
        assert!(r[2] < r[4], "angular column below alpha/gamma");
    }
    for name in ["traj_angular_n10.csv", "traj_frequency_n10.csv", "traj_angular_n100.csv", "traj_frequency_n100.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let m = metrics(dir.path());
    assert_eq!(m["bound"].as_f64(), Some(1.0));
    assert_eq!(m["angular_below_bound"], Value::Bool(true));
    assert_eq!(m["frequency_increasing"], Value::Bool(true));
}

#[test]
fn negative_alpha_is_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.json");
    std::fs::write(
        &scenario,
        "{\n  \"model\": \"reduced\",\n  \"gains\": {\n    \"alpha\": -0.5,\n    \"gamma\": 1.0\n  }\n}\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = angdroop(&["run", "--scenario", scenario.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gains.alpha"), "{stderr}");
    assert!(stderr.contains(":4"), "diagnostic carries the line number: {stderr}");
    assert!(!out_dir.exists());
}

#[test]
fn negative_alpha_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = angdroop(&[
        "run", "--scenario", "reduced_ring", "--set", "gains.alpha=-1", "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gains.alpha"));
    assert!(!out_dir.exists());
}

#[test]
fn syntax_errors_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("broken.json");
    std::fs::write(&scenario, "{\n  \"model\": \"reduced\",\n  \"dt\": 0.1,,\n}\n").unwrap();
    let out = angdroop(&["run", "--scenario", scenario.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.json:3"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for scenario in ["reduced_ring", "linearized_path", "testcase2"] {
        let a = dir.path().join(format!("{scenario}_a"));
        let b = dir.path().join(format!("{scenario}_b"));
        for d in [&a, &b] {
            run_ok(&["run", "--scenario", scenario, "--seed", "11", "--out", d.to_str().unwrap()]);
        }
        let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            assert_eq!(
                std::fs::read(a.join(&name)).unwrap(),
                std::fs::read(b.join(&name)).unwrap(),
                "{scenario}/{name:?}"
            );
        }
    }
}

#[test]
fn converter_smoke_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let d = dir.path().join(tag);
        run_ok(&[
            "run", "--scenario", "testcase1", "--horizon", "0.01", "--set", "converter.pre_run_horizon=0.01",
            "--out", d.to_str().unwrap(),
        ]);
        outputs.push((std::fs::read(d.join("traj_converter.csv")).unwrap(), std::fs::read(d.join("metrics.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn overrides_take_precedence_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "run", "--scenario", "reduced_ring", "--set", "gains.alpha=1.5", "--horizon", "2", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let m = metrics(dir.path());
    assert_eq!(m["horizon"].as_f64(), Some(2.0));
    assert_eq!(m["overrides"]["gains.alpha"].as_f64(), Some(1.5));
    assert_eq!(m["overrides"]["horizon"].as_f64(), Some(2.0));
    let (_, rows) = csv_rows(&dir.path().join("traj_reduced.csv"));
    assert!((rows.last().unwrap()[0] - 2.0).abs() < 1e-9);
}

#[test]
fn reduced_run_reports_hjb_and_settling() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["run", "--scenario", "reduced_ring", "--out", dir.path().to_str().unwrap()]);
    let m = metrics(dir.path());
    assert!(m["hjb_residual_max"].as_f64().unwrap() < 1e-12);
    assert!(m["settle_time_s"].as_f64().is_some());
    assert!(m["freq_error_final"].as_f64().unwrap() < 1e-6);
    assert_eq!(m["value_nonincreasing"], Value::Bool(true));
    for key in ["coherence_value", "bound"] {
        assert!(m[key].is_null(), "{key}");
    }
}

#[test]
fn linearized_run_matches_closed_form_coherence() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["run", "--scenario", "linearized_path", "--out", dir.path().to_str().unwrap()]);
    let m = metrics(dir.path());
    let value = m["coherence_value"].as_f64().unwrap();
    // Path on 5 nodes: eigenvalues 2 - 2 cos(k pi / 5).
    let expected: f64 = (1..5)
        .map(|k| 1.0 / (1.0 + 2.0 - 2.0 * (k as f64 * std::f64::consts::PI / 5.0).cos()))
        .sum::<f64>()
        / 5.0;
    assert!((value - expected).abs() < 1e-12);
    assert!(m["coherence_empirical_rel_error"].as_f64().unwrap().abs() < 0.05);
    assert!(m["settle_time_s"].as_f64().is_some());
}

#[test]
fn frequency_droop_linearized_run() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "run", "--scenario", "linearized_path", "--set", "linearized.controller=frequency", "--set",
        "gains={}", "--set", "linearized.stochastic=null", "--out", dir.path().to_str().unwrap(),
    ]);
    let (header, _) = csv_rows(&dir.path().join("traj_linearized.csv"));
    assert_eq!(header.len(), 1 + 10);
    let m = metrics(dir.path());
    let expected: f64 = (1..5)
        .map(|k| 1.0 / (2.0 - 2.0 * (k as f64 * std::f64::consts::PI / 5.0).cos()))
        .sum::<f64>()
        / 10.0;
    assert!((m["coherence_value"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert!(m["bound"].is_null());
}

#[test]
fn verify_suites_pass() {
    let out = run_ok(&["verify", "all"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains("FAIL"), "{text}");
    for suite in ["hjb", "gradient", "riccati", "coherence", "stability"] {
        assert!(text.contains(&format!("[{suite}]")), "{text}");
        run_ok(&["verify", suite]);
    }
}

#[test]
fn verify_rejects_non_reduced_scenario() {
    let out = angdroop(&["verify", "hjb", "--scenario", "testcase2"]);
    assert!(!out.status.success());
}

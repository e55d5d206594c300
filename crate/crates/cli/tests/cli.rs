use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_imu-array"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn imu-array")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn geometry(name: &str) -> String {
    scenarios()
        .join("geometry")
        .join(format!("{name}.json"))
        .to_string_lossy()
        .into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_one_row_per_channel() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    std::fs::write(&state, r#"{"omega": [10, -20, 30], "specific_force": [0, 0, 9.81]}"#).unwrap();
    let out = dir.path().join("m.csv");
    let o = run(&[
        "simulate",
        "--geometry",
        &geometry("planar_square"),
        "--state",
        path_str(&state),
        "--seed",
        "7",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "channel_id,kind,triad_index,axis,value_SI,saturated");
    assert_eq!(lines.len(), 1 + 24);
    assert_eq!(lines.iter().filter(|l| l.contains(",accel,")).count(), 12);
    assert_eq!(lines.iter().filter(|l| l.contains(",gyro,")).count(), 12);
}

#[test]
fn simulate_flags_clipped_gyros() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let o = run(&[
        "simulate",
        "--preset",
        "planar_square",
        "--omega",
        "2100,0,0",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let saturated: Vec<&str> = text.lines().skip(1).filter(|l| l.ends_with(",1")).collect();
    assert_eq!(saturated.len(), 4);
    assert!(saturated.iter().all(|l| l.contains(",gyro,") && l.contains(",x,")));
    assert!(String::from_utf8_lossy(&o.stderr).contains("4 saturated"));
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let sim = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = run(&["simulate", "--preset", "cube", "--omega", "100,-50,20", "--seed", seed, "--out", path_str(&out)]);
        assert!(o.status.success());
        std::fs::read(out).unwrap()
    };
    assert_eq!(sim("42", "a.csv"), sim("42", "b.csv"));
    assert_ne!(sim("42", "a.csv"), sim("43", "c.csv"));
}

#[test]
fn noiseless_round_trip_recovers_state() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let est = dir.path().join("est.json");
    let o = run(&[
        "simulate",
        "--preset",
        "cube",
        "--omega",
        "300,-120,45",
        "--omega-dot",
        "1000,200,-500",
        "--specific-force",
        "0.5,-1,9.81",
        "--noiseless",
        "--out",
        path_str(&m),
    ]);
    assert!(o.status.success());
    let o = run(&["estimate", "--preset", "cube", "--measurement", path_str(&m), "--out", path_str(&est)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&est).unwrap()).unwrap();
    let get = |k: &str| -> Vec<f64> { v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    for (got, want) in get("omega").iter().zip([300.0, -120.0, 45.0]) {
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
    for (got, want) in get("omega_dot").iter().zip([1000.0, 200.0, -500.0]) {
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
    for (got, want) in get("specific_force_m_s2").iter().zip([0.5, -1.0, 9.81]) {
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
    assert_eq!(v["converged"], true);
    assert_eq!(v["units"], "deg");
}

#[test]
fn radians_flag_applies_to_inputs_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let o = run(&["--units", "rad", "simulate", "--preset", "planar_square", "--omega", "1,2,-3", "--noiseless", "--out", path_str(&m)]);
    assert!(o.status.success());
    let o = run(&["--units", "rad", "estimate", "--preset", "planar_square", "--measurement", path_str(&m)]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["omega"][2].as_f64().unwrap() + 3.0).abs() < 1e-9);
}

#[test]
fn saturated_measurement_still_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let o = run(&["simulate", "--preset", "planar_square", "--omega", "2500,0,0", "--seed", "1", "--out", path_str(&m)]);
    assert!(o.status.success());
    let o = run(&["estimate", "--preset", "planar_square", "--measurement", path_str(&m)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let wx = v["omega"][0].as_f64().unwrap();
    assert!(wx.is_finite() && (wx - 2500.0).abs() < 100.0, "{wx}");
    assert_eq!(v["pruned_channels"].as_array().unwrap().len(), 4);
}

#[test]
fn collinear_geometry_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("line.json");
    std::fs::write(
        &g,
        r#"{"accel_positions_m": [[-0.01,0,0],[0,0,0],[0.01,0,0]], "n_gyro_triads": 2, "gyro_saturation_dps": 2000}"#,
    )
    .unwrap();
    let m = dir.path().join("m.csv");
    let o = run(&["simulate", "--geometry", path_str(&g), "--omega", "1,2,3", "--out", path_str(&m)]);
    assert!(o.status.success());
    let o = run(&["estimate", "--geometry", path_str(&g), "--measurement", path_str(&m)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("collinear"));

    let o = run(&["check", "--geometry", path_str(&g)]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["identifiable"], false);
}

#[test]
fn missing_files_exit_with_io_code() {
    let o = run(&["check", "--geometry", "/nonexistent/geometry.json"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["estimate", "--preset", "cube", "--measurement", "/nonexistent/m.csv"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn non_convergence_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let o = run(&["simulate", "--preset", "cube", "--omega", "1500,-900,700", "--seed", "2", "--out", path_str(&m)]);
    assert!(o.status.success());
    let o = run(&["estimate", "--preset", "cube", "--measurement", path_str(&m), "--max-iterations", "1", "--step-tolerance", "1e-300"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    // The estimate is still written.
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["converged"], false);
}

#[test]
fn crb_at_rest_is_the_gyro_base_level() {
    let o = run(&["crb", "--geometry", &geometry("planar_square"), "--speeds", "0"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("speed_dps,axis,sqrt_crb_full,sqrt_crb_saturated"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let sd: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((sd - 0.5).abs() < 1e-9, "{row}");
    }
}

#[test]
fn crb_default_sweep_has_61_speeds() {
    let o = run(&["crb", "--preset", "cube", "--direction", "1,1,1"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1 + 61 * 3);
}

#[test]
fn check_distinguishes_planar_and_cube() {
    let verdict = |name: &str| -> serde_json::Value {
        let o = run(&["check", "--geometry", &geometry(name)]);
        assert!(o.status.success());
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let planar = verdict("planar_square");
    let cube = verdict("cube");
    assert_eq!(planar["identifiable"], true);
    assert_eq!(cube["identifiable"], true);
    assert_eq!(planar["tensor_capable"], false);
    assert_eq!(cube["tensor_capable"], true);
}

#[test]
fn tensor_subcommand_reports_signed_rate() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let o = run(&["simulate", "--preset", "cube", "--omega", "-400,300,200", "--noiseless", "--out", path_str(&m)]);
    assert!(o.status.success());
    let o = run(&["tensor", "--preset", "cube", "--measurement", path_str(&m)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for (a, want) in [-400.0, 300.0, 200.0].into_iter().enumerate() {
        let got = v["omega_signed"][a].as_f64().unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    let o = run(&["tensor", "--preset", "planar_square", "--measurement", path_str(&m)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn montecarlo_scenario_is_reproducible_and_tracks_crb() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("fig4a.json");
    let report = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = bin()
            .args(["montecarlo", "--scenario", path_str(&scenario), "--runs", "400", "--threads", threads, "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out).unwrap()
    };
    let a = report("a.csv", "1");
    let b = report("b.csv", "3");
    assert_eq!(a, b);
    let mut rows = 0;
    for line in a.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let speed: f64 = f[0].parse().unwrap();
        if f[1] != "ml" || speed > 1500.0 {
            continue;
        }
        let ratio = f[3].parse::<f64>().unwrap() / f[4].parse::<f64>().unwrap();
        // 400 runs: the RMSE ratio has a standard error of about 3.5%.
        assert!((0.85..1.15).contains(&ratio), "{line}");
        rows += 1;
    }
    assert!(rows > 100);
}

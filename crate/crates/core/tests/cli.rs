//! Black-box tests of the `p2pvolt` binary: exit codes, file outputs and
//! the plot-data transformation.

use p2pvolt::control::{CompensatorState, Snapshot};
use p2pvolt::grid_model;
use p2pvolt::sensitivity::sensitivity_matrix;
use p2pvolt::sim::CsvTable;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bundled(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/bundled/{name}"))
}

fn p2pvolt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2pvolt"))
        .args(args)
        .output()
        .expect("spawn p2pvolt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    let out = p2pvolt(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("simulate"));
}

#[test]
fn powerflow_without_injections_is_flat() {
    let net = bundled("network_20node.json");
    let out = p2pvolt(&["powerflow", "--network", net.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut lines = stdout.lines();
    assert_eq!(
        lines.next().unwrap(),
        "node,v_pu,angle_rad,p_inj_pu,q_inj_pu"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 21);
    for row in rows {
        assert_eq!(row.split(',').nth(1).unwrap(), "1.00000000e0");
    }
}

#[test]
fn powerflow_rejects_a_meshed_network() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mesh.json");
    std::fs::write(
        &path,
        r#"{"v_base_volts": 400.0, "s_base_va": 100000.0,
            "nodes": [{"id": "sub", "kind": "slack"},
                      {"id": "a", "kind": "load"},
                      {"id": "b", "kind": "load"}],
            "branches": [{"from": "sub", "to": "a", "r_ohm": 0.1, "x_ohm": 0.05},
                         {"from": "a", "to": "b", "r_ohm": 0.1, "x_ohm": 0.05},
                         {"from": "b", "to": "sub", "r_ohm": 0.1, "x_ohm": 0.05}]}"#,
    )
    .unwrap();
    let out = p2pvolt(&["powerflow", "--network", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("loop"), "stderr: {}", stderr(&out));
}

#[test]
fn powerflow_reports_non_convergence_as_numerical_failure() {
    let net = bundled("network_20node.json");
    let out = p2pvolt(&[
        "powerflow",
        "--network",
        net.to_str().unwrap(),
        "--inject",
        "h20=-50,0",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn powerflow_rejects_malformed_injection() {
    let net = bundled("network_20node.json");
    let out = p2pvolt(&[
        "powerflow",
        "--network",
        net.to_str().unwrap(),
        "--inject",
        "h20:0.1",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_scenario_file_is_a_validation_error() {
    let out = p2pvolt(&["simulate", "--scenario", "/nonexistent/run.json"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn sensitivity_dump_matches_path_resistance() {
    let dir = tempfile::tempdir().unwrap();
    let net = bundled("network_20node.json");
    let out = p2pvolt(&[
        "sensitivity",
        "--network",
        net.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let text = std::fs::read_to_string(dir.path().join("dv_dp.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "node");
    let col = header.iter().position(|&h| h == "h20").expect("pv node h20");
    let h20_row: Vec<&str> = lines
        .find(|l| l.starts_with("h20,"))
        .expect("row for h20")
        .split(',')
        .collect();
    // 20 spans of 0.0236 ohm on a 1.6 ohm base.
    let expect = 20.0 * 0.0236 / 1.6;
    let got: f64 = h20_row[col].parse().unwrap();
    assert!((got - expect).abs() < 1e-12, "got {got}, expected {expect}");
}

#[test]
fn solve_snapshot_round_trips_and_respects_the_box() {
    let network_text = r#"{"v_base_volts": 400.0, "s_base_va": 100000.0,
        "nodes": [{"id": "sub", "kind": "slack"},
                  {"id": "a", "kind": "load", "der": "pv"}],
        "branches": [{"from": "sub", "to": "a", "r_ohm": 0.16, "x_ohm": 0.16}]}"#;
    let net = grid_model::to_per_unit(&grid_model::load_network(network_text).unwrap()).unwrap();
    let a = net.node_by_name("a").unwrap();
    let sens = sensitivity_matrix(&net, &[a]).unwrap();

    let n = net.node_count();
    let snapshot = Snapshot {
        v0: {
            let mut v = vec![1.0; n];
            v[a] = 1.06;
            v
        },
        compensators: vec![CompensatorState {
            der_id: "pv".into(),
            node: a,
            c_p: 4.0,
            c_q: 1.0,
            p_setpoint_0: 0.0,
            q_setpoint_0: 0.0,
            delta_p_min: 0.0,
            delta_p_max: 0.0,
            delta_q_min: -0.1,
            delta_q_max: 0.1,
            s_rated: 0.5,
            delta_p: 0.0,
            delta_q: 0.0,
            sens_p: (0..n).map(|i| sens.dv_dp[i][0]).collect(),
            sens_q: (0..n).map(|i| sens.dv_dq[i][0]).collect(),
        }],
        sensitivity: sens,
        v_min: 0.95,
        v_max: 1.05,
        alpha: 50.0,
        monitored: vec![a],
    };

    let dir = tempfile::tempdir().unwrap();
    let snap_path = dir.path().join("snap.json");
    std::fs::write(&snap_path, serde_json::to_string(&snapshot).unwrap()).unwrap();

    let out = p2pvolt(&["solve-snapshot", "--snapshot", snap_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let solution: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("solution JSON on stdout");
    assert_eq!(solution["converged"], serde_json::Value::Bool(true));
    let dq = solution["delta_q"][0].as_f64().unwrap();
    // dV/dQ at `a` is 0.1 pu/pu, so removing the 0.01 pu excess costs the
    // full -0.1 pu box.
    assert!((dq + 0.1).abs() < 1e-4, "dq = {dq}");
    let v = solution["voltages"][a].as_f64().unwrap();
    assert!((v - 1.05).abs() < 1e-4, "v = {v}");
}

fn run_simulation_to(scenario: &Path, dir: &Path, name: &str, control: &str) -> PathBuf {
    let out_path = dir.join(name);
    let out = p2pvolt(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--control",
        control,
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_path.exists());
    out_path
}

#[test]
fn plot_data_panels_are_consistent_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = bundled("static_overvoltage.json");
    let on = run_simulation_to(&scenario, dir.path(), "on.csv", "on");
    let off = run_simulation_to(&scenario, dir.path(), "off.csv", "off");
    assert!(dir.path().join("on.csv.summary.csv").exists());

    let panels = dir.path().join("panels");
    let args = [
        "plot-data",
        "--run",
        on.to_str().unwrap(),
        "--uncontrolled",
        off.to_str().unwrap(),
        "--out",
        panels.to_str().unwrap(),
    ];
    let out = p2pvolt(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    for f in [
        "aggregate_power.csv",
        "voltages_uncontrolled.csv",
        "delta_q.csv",
        "voltages_controlled.csv",
    ] {
        assert!(panels.join(f).exists(), "missing {f}");
    }

    // Panel 1 equals the row-sum of the run's P_ columns.
    let run = CsvTable::read(&on).unwrap();
    let p_cols = run.columns_with_prefix("P_");
    let agg = CsvTable::read(&panels.join("aggregate_power.csv")).unwrap();
    assert_eq!(agg.header, vec!["time_s", "p_total"]);
    assert_eq!(agg.rows.len(), run.rows.len());
    for (arow, rrow) in agg.rows.iter().zip(&run.rows) {
        let total: f64 = p_cols.iter().map(|&i| rrow[i]).sum();
        assert!((arow[1] - total).abs() < 1e-9);
    }

    // Panel 3 carries the constant limit columns.
    let dq = CsvTable::read(&panels.join("delta_q.csv")).unwrap();
    assert_eq!(dq.header.last().unwrap(), "dq_limit_lower");
    let last = dq.header.len() - 1;
    assert!(dq.rows.iter().all(|r| r[last] == -0.05 && r[last - 1] == 0.05));

    // Re-deriving the panels is byte-stable.
    let before = std::fs::read(panels.join("voltages_controlled.csv")).unwrap();
    let out = p2pvolt(&args);
    assert_eq!(code(&out), 0);
    let after = std::fs::read(panels.join("voltages_controlled.csv")).unwrap();
    assert_eq!(before, after);
}

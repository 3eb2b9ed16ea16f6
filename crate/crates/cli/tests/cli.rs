use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn convdk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convdk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn table_rows(out: &str) -> Vec<(u64, u64, u64)> {
    out.lines()
        .filter_map(|l| {
            let v: Vec<u64> = l.split_whitespace().map(|x| x.parse().ok()).collect::<Option<_>>()?;
            (v.len() == 3).then(|| (v[0], v[1], v[2]))
        })
        .collect()
}

#[test]
fn schedule_prints_worked_example() {
    let o = convdk(&["schedule", "--kw", "3", "--s", "2", "--n", "30"]);
    assert_eq!(o.status.code(), Some(0));
    let rows = table_rows(&stdout(&o));
    assert_eq!(rows.len(), 45);
    let shifts: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.0).collect();
    assert_eq!(shifts.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(rows.iter().all(|&(a, n, m)| m * 2 == n * 3 + a));
}

#[test]
fn schedule_single_block_starts_at_origin() {
    let o = convdk(&["schedule", "--kw", "3", "--s", "1", "--n", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let rows = table_rows(&stdout(&o));
    assert_eq!(rows[0], (0, 0, 0));
    assert_eq!(rows, vec![(0, 0, 0), (1, 0, 1), (2, 0, 2)]);
}

#[test]
fn schedule_reports_condition_failure() {
    let o = convdk(&["schedule", "--kw", "9", "--s", "3"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("condition 2"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not schedulable"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(convdk(&["schedule", "--kw", "3"]).status.code(), Some(2));
    assert_eq!(convdk(&["run", "--model", "mobilenet_v1", "--dataflow", "os"]).status.code(), Some(2));
    assert_eq!(convdk(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn run_writes_reports_for_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = convdk(&["run", "--model", "mobilenet_v2", "--dataflow", "ws-convdk", "-o", out, "--emit-plan"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let json: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("mobilenet_v2_ws-convdk.json")).unwrap()).unwrap();
    assert_eq!(json["layers"].as_array().unwrap().len(), 17);
    assert_eq!(json["aggregate"]["layer"], "TOTAL");
    let plans: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("mobilenet_v2_ws-convdk_plan.json")).unwrap()).unwrap();
    assert_eq!(plans.as_array().unwrap().len(), 17);
}

fn cell_matches(cell: &str, v: &Value) -> bool {
    match v {
        Value::Null => cell.is_empty(),
        Value::String(s) => s == cell,
        Value::Bool(b) => cell == b.to_string(),
        Value::Number(n) => cell.parse::<f64>().ok() == n.as_f64(),
        _ => false,
    }
}

fn lookup<'a>(v: &'a Value, dotted: &str) -> &'a Value {
    dotted.split('.').fold(v, |acc, k| &acc[k])
}

#[test]
fn csv_and_json_carry_identical_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = convdk(&["run", "--model", "mobilenet_v3_small", "--dataflow", "is-convdk", "-o", out]);
    assert_eq!(o.status.code(), Some(0));
    let json: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("mobilenet_v3_small_is-convdk.json")).unwrap()).unwrap();
    let mut rd = csv::Reader::from_path(dir.path().join("mobilenet_v3_small_is-convdk.csv")).unwrap();
    let header = rd.headers().unwrap().clone();
    let mut reports: Vec<&Value> = json["layers"].as_array().unwrap().iter().collect();
    reports.push(&json["aggregate"]);
    let records: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), reports.len());
    for (rec, rep) in records.iter().zip(reports) {
        for (name, cell) in header.iter().zip(rec.iter()) {
            let v = if name == "model" { &json["model"] } else { lookup(rep, name) };
            assert!(cell_matches(cell, v), "{name}: csv {cell:?} vs json {v}");
        }
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = convdk(&["run", "--model", "efficientnet_b0", "--dataflow", "ws-baseline", "-o", d.path().to_str().unwrap(), "--emit-plan"]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["efficientnet_b0_ws-baseline.json", "efficientnet_b0_ws-baseline.csv", "efficientnet_b0_ws-baseline_plan.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn custom_layer_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    let layers = dir.path().join("custom.json");
    write(
        &layers,
        r#"{"name": "custom", "layers": [
            {"name": "a", "channels": 24, "height": 40, "width": 40, "kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": 1},
            {"name": "b", "channels": 48, "height": 20, "width": 20, "kernel_h": 5, "kernel_w": 5, "stride": 2, "padding": 2}
        ]}"#,
    );
    let o = convdk(&["run", "--layers", layers.to_str().unwrap(), "--dataflow", "is-baseline", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let json: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("custom_is-baseline.json")).unwrap()).unwrap();
    let names: Vec<&str> = json["layers"].as_array().unwrap().iter().map(|l| l["layer"].as_str().unwrap()).collect();
    assert_eq!(names, ["a", "b"]);
}

#[test]
fn invalid_layers_exit_3_and_capacity_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let layers = dir.path().join("even.json");
    write(
        &layers,
        r#"{"name": "even", "layers": [
            {"name": "e", "channels": 4, "height": 8, "width": 8, "kernel_h": 4, "kernel_w": 4, "stride": 1, "padding": 0}
        ]}"#,
    );
    let out = dir.path().to_str().unwrap();
    let o = convdk(&["run", "--layers", layers.to_str().unwrap(), "-o", out]);
    assert_eq!(o.status.code(), Some(3));
    let small = dir.path().join("macro.json");
    write(&small, r#"{"ib_bytes": 64}"#);
    let o = convdk(&["run", "--model", "mobilenet_v1", "--macro", small.to_str().unwrap(), "-o", out]);
    assert_eq!(o.status.code(), Some(4));
    let energy = dir.path().join("energy.json");
    write(&energy, r#"{"dram_pj_per_bit": -1.0}"#);
    let o = convdk(&["run", "--model", "mobilenet_v1", "--energy", energy.to_str().unwrap(), "-o", out]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn compare_normalizes_to_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let o = convdk(&["compare", "--model", "mobilenet_v1", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let json: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("compare.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["model"] == "mobilenet_v1"));
    let base = rows.iter().find(|r| r["dataflow"] == "ws-baseline").unwrap();
    for (k, v) in base.as_object().unwrap() {
        if k.ends_with("_norm") {
            assert_eq!(v.as_f64(), Some(1.0), "{k}");
        }
    }
    for r in rows {
        assert!((r["dram_norm"].as_f64().unwrap() - 1.0).abs() <= 0.01);
    }
    let mut rd = csv::Reader::from_path(dir.path().join("compare.csv")).unwrap();
    let header = rd.headers().unwrap().clone();
    for (rec, row) in rd.records().map(|r| r.unwrap()).zip(rows) {
        for (name, cell) in header.iter().zip(rec.iter()) {
            assert!(cell_matches(cell, &row[name]), "{name}");
        }
    }
}

#[test]
fn verify_passes_and_catches_the_canary() {
    let o = convdk(&["verify", "--grid", "kmax=11", "--instances", "24"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
    let o = convdk(&["verify", "--inject-fault", "m1", "--instances", "12"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stdout(&o).contains("FAIL"));
}

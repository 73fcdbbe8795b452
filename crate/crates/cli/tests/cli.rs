use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn abcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abcast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{"seed": 4, "duration_us": 200000, "num_order_servers": 3}"#;

#[test]
fn simulate_writes_metrics_trace_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = abcast(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["order_violations"], 0);
    assert!(m["delivered_total"].as_u64().unwrap() > 0);
    assert!(m["latency_percentiles"]["p50_us"].as_u64().unwrap() > 0);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("sim_time_us,node,event_kind,msg_id,detail"));
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 4);
}

#[test]
fn check_trace_flags_a_reordered_delivery() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    assert!(
        abcast(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()])
            .status
            .success()
    );
    let trace = out.join("trace.csv");
    let ok = abcast(&["check-trace", trace.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));

    // Swap the message ids of node 1's first two deliveries.
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let idx: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.split(',').nth(1) == Some("1") && l.split(',').nth(2) == Some("DELIVER"))
        .map(|(i, _)| i)
        .take(2)
        .collect();
    let id = |l: &str| l.split(',').nth(3).unwrap().to_string();
    let (a, b) = (id(&lines[idx[0]]), id(&lines[idx[1]]));
    lines[idx[0]] = lines[idx[0]].replacen(&format!(",{a},"), &format!(",{b},"), 1);
    lines[idx[1]] = lines[idx[1]].replacen(&format!(",{b},"), &format!(",{a},"), 1);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let o = abcast(&["check-trace", bad.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("disagree"));
}

#[test]
fn sweep_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"seed": 1, "duration_us": 200000, "scenario": "direct_gmd", "num_client_nodes": 6}"#,
    );
    let out = dir.path().join("sweep");
    let o = abcast(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "participant_count",
        "--values",
        "2,3,4",
        "--seeds",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("axis,value,scenario,mode,seed"));
    assert_eq!(rows.len(), 1 + 6);
    assert!(rows[1].starts_with("participant_count,2,direct_gmd"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 1, "not_a_field": true}"#);
    let o = abcast(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_field"));

    let cfg = write_config(dir.path(), r#"{"seed": 1}"#);
    let o = abcast(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "no.such.field",
        "--values",
        "1",
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = abcast(&[
        "check-trace",
        dir.path().join("missing.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn estimate_d_prints_worst_case_delay_and_bound() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples.csv");
    let mut text = String::from("from,to,delay_us\n");
    for d in 1..=100 {
        text.push_str(&format!("{},{},{}\n", d % 3, (d + 1) % 3, d * 10));
    }
    text.push_str("0,1,-5\n");
    fs::write(&samples, text).unwrap();
    let o = abcast(&[
        "estimate-d",
        "--samples",
        samples.to_str().unwrap(),
        "--eta",
        "200",
        "--theta",
        "50",
        "--epsilon",
        "7",
        "--percentile",
        "0.99",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    // nearest rank ceil(0.99 * 100) = 99 -> 990us, plus epsilon
    assert!(stdout.contains("d_i=997"), "{stdout}");
    assert!(
        stdout.contains(&format!("D={}", 2 * 997 + 2 * 200 + 50)),
        "{stdout}"
    );
    assert!(stdout.contains("skipped=1"), "{stdout}");
}

//! End-to-end checks of the command-line surface: exact flags, JSON error
//! payloads, and deterministic outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pipeplan"))
}

fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

fn unif6_profile() -> String {
    let mut layers = Vec::new();
    for i in 0..6 {
        layers.push(format!(
            r#"{{"name": "layer{i}", "state_bytes": 100000000,
                "activation_bytes_per_sample": 0,
                "fwd_ms": {{"1": 2.0}}, "bwd_ms": {{"1": 4.0}}}}"#
        ));
    }
    format!(
        r#"{{"gpus_per_node": 1, "microbatch_reference": 1, "layers": [{}]}}"#,
        layers.join(",")
    )
}

fn seven_node_cluster() -> &'static str {
    // 6 layers x 100 MB over 0.5 GB GPUs at 0.8 utilization: n0 = 2.
    r#"{"nodes": 7, "gpus_per_node": 1, "gpu_mem_bytes": 500000000,
        "xfer_gbps": 10.0, "coord_overhead_ms": 1000.0}"#
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pipeplan-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stderr_json(output: &Output) -> Value {
    let raw = String::from_utf8_lossy(&output.stderr);
    let line = raw.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {raw}"))
}

fn make_bundle(dir: &Path) -> PathBuf {
    let profile = write(dir, "profile.json", &unif6_profile());
    let cluster = write(dir, "cluster.json", seven_node_cluster());
    let out = dir.join("bundle.json");
    let output = bin()
        .args(["templates", "--profile"])
        .arg(&profile)
        .arg("--cluster")
        .arg(&cluster)
        .args(["--f", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("n0=2"), "summary missing: {stdout}");
    assert!(stdout.contains("sizes=[2, 3, 4, 5]"), "summary missing: {stdout}");
    out
}

#[test]
fn templates_generates_expected_sizes_and_is_deterministic() {
    let dir = workdir("templates");
    let out = make_bundle(&dir);
    let first = std::fs::read_to_string(&out).unwrap();
    let bundle: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(bundle["node_spec"]["sizes"], serde_json::json!([2, 3, 4, 5]));
    assert_eq!(bundle["templates"].as_array().unwrap().len(), 4);

    // Rerun writes identical bytes.
    let _ = make_bundle(&dir);
    let second = std::fs::read_to_string(&out).unwrap();
    assert_eq!(first, second);
}

#[test]
fn templates_rejects_too_small_clusters() {
    let dir = workdir("templates-err");
    let profile = write(&dir, "profile.json", &unif6_profile());
    let cluster = write(
        &dir,
        "cluster.json",
        r#"{"nodes": 3, "gpus_per_node": 1, "gpu_mem_bytes": 500000000,
            "xfer_gbps": 10.0, "coord_overhead_ms": 1000.0}"#,
    );
    let out = dir.join("bundle.json");
    let output = bin()
        .args(["templates", "--profile"])
        .arg(&profile)
        .arg("--cluster")
        .arg(&cluster)
        .args(["--f", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = stderr_json(&output);
    assert!(
        err["error"]
            .as_str()
            .unwrap()
            .contains("cannot maintain f+1 replicas"),
        "{err}"
    );
}

#[test]
fn plan_thirteen_nodes_uses_them_all() {
    let dir = workdir("plan13");
    let bundle = make_bundle(&dir);
    let job = write(
        &dir,
        "job.json",
        r#"{"f": 1, "global_batch": 128, "microbatch": 4}"#,
    );
    let out = dir.join("plan.json");
    let output = bin()
        .args(["plan", "--templates"])
        .arg(&bundle)
        .args(["--nodes", "13", "--job"])
        .arg(&job)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let plan: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let counts: Vec<u64> = plan["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let used: u64 = counts
        .iter()
        .zip([2u64, 3, 4, 5])
        .map(|(&x, n)| x * n)
        .sum();
    assert_eq!(used, 13);
    assert!(plan["throughput_sps"].as_f64().unwrap() > 0.0);
}

#[test]
fn plan_error_payload_recommends_global_batch() {
    let dir = workdir("plan-recommend");
    let bundle = make_bundle(&dir);
    // B = b = 4 cannot feed the mandatory two pipelines.
    let job = write(
        &dir,
        "job.json",
        r#"{"f": 1, "global_batch": 4, "microbatch": 4}"#,
    );
    let out = dir.join("plan.json");
    let output = bin()
        .args(["plan", "--templates"])
        .arg(&bundle)
        .args(["--nodes", "4", "--job"])
        .arg(&job)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = stderr_json(&output);
    assert_eq!(err["recommended_global_batch"], serde_json::json!(8));
}

#[test]
fn plan_all_lists_both_seven_node_candidates() {
    // Sizes (2, 3, 4) come from a six-node cluster; planning for seven
    // nodes admits exactly (2,1,0) and (0,1,1).
    let dir = workdir("plan-all");
    let profile = write(&dir, "profile.json", &unif6_profile());
    let cluster = write(
        &dir,
        "cluster.json",
        r#"{"nodes": 6, "gpus_per_node": 1, "gpu_mem_bytes": 500000000,
            "xfer_gbps": 10.0, "coord_overhead_ms": 1000.0}"#,
    );
    let bundle = dir.join("bundle.json");
    let output = bin()
        .args(["templates", "--profile"])
        .arg(&profile)
        .arg("--cluster")
        .arg(&cluster)
        .args(["--f", "1", "--out"])
        .arg(&bundle)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let job = write(
        &dir,
        "job.json",
        r#"{"f": 1, "global_batch": 128, "microbatch": 4}"#,
    );
    let out = dir.join("plan.json");
    let output = bin()
        .args(["plan", "--templates"])
        .arg(&bundle)
        .args(["--nodes", "7", "--job"])
        .arg(&job)
        .args(["--all", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let candidates = report["candidates"].as_array().unwrap();
    assert_eq!(candidates.len(), 2, "{report}");
    let mut counts: Vec<Vec<u64>> = candidates
        .iter()
        .map(|c| {
            c["counts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_u64().unwrap())
                .collect()
        })
        .collect();
    counts.sort();
    assert_eq!(counts, vec![vec![0, 1, 1], vec![2, 1, 0]]);
}

#[test]
fn batch_distributes_counts_vector() {
    let dir = workdir("batch");
    let bundle = make_bundle(&dir);
    let job = write(
        &dir,
        "job.json",
        r#"{"f": 1, "global_batch": 96, "microbatch": 4}"#,
    );
    let output = bin()
        .args(["batch", "--templates"])
        .arg(&bundle)
        .args(["--counts", "2,1,0,0", "--job"])
        .arg(&job)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let assignment: Value =
        serde_json::from_str(&String::from_utf8_lossy(&output.stdout)).unwrap();
    let micro: Vec<u64> = assignment["microbatches"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(micro.iter().sum::<u64>(), 24);
    assert_eq!(micro.len(), 3);
}

#[test]
fn simulate_empty_trace_and_floor_exit() {
    let dir = workdir("simulate");
    let bundle = make_bundle(&dir);
    let job = write(
        &dir,
        "job.json",
        r#"{"f": 1, "global_batch": 128, "microbatch": 4}"#,
    );
    let empty = write(&dir, "empty.jsonl", "");
    let out = dir.join("report.json");
    let output = bin()
        .args(["simulate", "--templates"])
        .arg(&bundle)
        .arg("--trace")
        .arg(&empty)
        .arg("--job")
        .arg(&job)
        .args(["--horizon-s", "600", "--seed", "7", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["breakdown"]["training"], serde_json::json!(1.0));
    assert_eq!(report["exit"]["kind"], serde_json::json!("completed"));

    // Dropping below the floor is a modeled outcome, not a tool failure.
    let deadly = write(
        &dir,
        "deadly.jsonl",
        r#"{"t_s": 60.0, "kind": "fail", "count": 5}"#,
    );
    let output = bin()
        .args(["simulate", "--templates"])
        .arg(&bundle)
        .arg("--trace")
        .arg(&deadly)
        .arg("--job")
        .arg(&job)
        .args(["--horizon-s", "600", "--seed", "7", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["exit"]["kind"], serde_json::json!("checkpoint_exit"));
    assert_eq!(report["exit"]["t_s"], serde_json::json!(60.0));
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = workdir("simulate-seed");
    let bundle = make_bundle(&dir);
    let job = write(
        &dir,
        "job.json",
        r#"{"f": 1, "global_batch": 128, "microbatch": 4}"#,
    );
    let trace = write(
        &dir,
        "trace.jsonl",
        "{\"t_s\": 120.0, \"kind\": \"fail\", \"count\": 1}\n\
         {\"t_s\": 400.0, \"kind\": \"join\", \"count\": 1}\n",
    );
    let run = |report: &Path, csv: &Path| {
        let output = bin()
            .args(["simulate", "--templates"])
            .arg(&bundle)
            .arg("--trace")
            .arg(&trace)
            .arg("--job")
            .arg(&job)
            .args(["--horizon-s", "900", "--seed", "42", "--out"])
            .arg(report)
            .arg("--csv")
            .arg(csv)
            .output()
            .unwrap();
        assert!(output.status.success(), "{output:?}");
    };
    let (r1, c1) = (dir.join("r1.json"), dir.join("c1.csv"));
    let (r2, c2) = (dir.join("r2.json"), dir.join("c2.csv"));
    run(&r1, &c1);
    run(&r2, &c2);
    assert_eq!(
        std::fs::read(&c1).unwrap(),
        std::fs::read(&c2).unwrap(),
        "CSV bytes differ across identical seeds"
    );
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let csv = String::from_utf8(std::fs::read(&c1).unwrap()).unwrap();
    assert!(csv.starts_with("t_s,throughput_sps,alive_nodes\n"));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

const SEED: &str = include_str!("../../core/assets/seed_program.py");

fn spark(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_spark"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn demo_config(dir: &Path, mode: &str) -> PathBuf {
    fs::write(dir.join("seed.py"), SEED).unwrap();
    let text = format!(
        r#"mode = "{mode}"
seed_program = "seed.py"
rng_seed = 2

[search]
budget = 1000
attempt_cap = 30

[backend]
kind = "stochastic"
p_valid = 0.8
seed = 2

[evaluator]
kind = "synthetic"

[[hooks]]
kind = "SEMANTIC"
forbidden_patterns = ["__INVALID_EDIT__"]

[output]
trace = "out/trace.jsonl"
checkpoint = "out/cp.json"
checkpoint_every = 5
record_timing = false
"#
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    demo_config(dir.path(), "SPARK");
    let (code, out, err) = spark(&["run", "--config", "run.toml"], dir.path());
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("attempts: 30"));
    assert!(dir.path().join("out/trace.best.py").exists());
    assert!(dir.path().join("out/cp.json").exists());
    let lines = fs::read_to_string(dir.path().join("out/trace.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 30);

    let (code, out, err) = spark(&["report", "out/trace.jsonl", "--reference-evals", "100"], dir.path());
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("efficiency"));
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/trace.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["attempts"], 30);
    let csv = fs::read_to_string(dir.path().join("out/trace.metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn seeds_flag_writes_one_trace_per_seed_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    demo_config(dir.path(), "FREEFORM");
    let (code, _, err) = spark(&["run", "--config", "run.toml", "--seeds", "1,2,3"], dir.path());
    assert_eq!(code, 0, "{err}");
    let traces: Vec<String> = (1..=3).map(|s| format!("out/trace.seed{s}.jsonl")).collect();
    for t in &traces {
        assert!(dir.path().join(t).exists(), "{t}");
    }
    let a = fs::read(dir.path().join(&traces[0])).unwrap();
    let b = fs::read(dir.path().join(&traces[1])).unwrap();
    assert_ne!(a, b);
    let mut args = vec!["report"];
    args.extend(traces.iter().map(String::as_str));
    let (code, _, err) = spark(&args, dir.path());
    assert_eq!(code, 0, "{err}");
    let agg = fs::read_to_string(dir.path().join("out/aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 31);
}

#[test]
fn halt_and_resume_match_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    demo_config(dir.path(), "SPARK");
    let (code, _, err) = spark(&["run", "--config", "run.toml", "--trace-out", "full.jsonl"], dir.path());
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = spark(&["run", "--config", "run.toml", "--halt-after", "12"], dir.path());
    assert_eq!(code, 0, "{err}");
    let (code, out, err) = spark(&["run", "--config", "run.toml", "--resume"], dir.path());
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("resuming after attempt 10"), "{out}");
    assert_eq!(
        fs::read(dir.path().join("out/trace.jsonl")).unwrap(),
        fs::read(dir.path().join("full.jsonl")).unwrap()
    );
}

#[test]
fn resume_rejects_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path(), "SPARK");
    spark(&["run", "--config", "run.toml", "--halt-after", "6"], dir.path());
    let text = fs::read_to_string(&cfg).unwrap().replace("rng_seed = 2", "rng_seed = 3");
    fs::write(&cfg, text).unwrap();
    let (code, _, err) = spark(&["run", "--config", "run.toml", "--resume"], dir.path());
    assert_eq!(code, 2, "{err}");
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path(), "SPARK");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("p_valid = 0.8", "p_valid = 1.5")
        .replace("budget = 1000", "budget = 0");
    fs::write(&cfg, text).unwrap();
    let (code, _, err) = spark(&["validate-config", "--config", "run.toml"], dir.path());
    assert_eq!(code, 2);
    assert!(err.contains("p_valid"), "{err}");
    assert!(err.contains("budget"), "{err}");

    let (code, _, err) = spark(&["validate-config", "--config", "missing.toml"], dir.path());
    assert_eq!(code, 2, "{err}");
}

#[test]
fn shipped_configs_validate() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for cfg in ["demo/spark.toml", "demo/freeform.toml", "http/spark.toml"] {
        let path = root.join(cfg);
        let (code, _, err) = spark(&["validate-config", "--config", path.to_str().unwrap()], &root);
        assert_eq!(code, 0, "{cfg}: {err}");
    }
}

#[test]
fn infeasible_seed_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    demo_config(dir.path(), "SPARK");
    let text = fs::read_to_string(dir.path().join("run.toml"))
        .unwrap()
        .replace(r#"forbidden_patterns = ["__INVALID_EDIT__"]"#, r#"forbidden_patterns = ["import torch"]"#);
    fs::write(dir.path().join("run.toml"), text).unwrap();
    let (code, _, err) = spark(&["run", "--config", "run.toml"], dir.path());
    assert_eq!(code, 3, "{err}");
}

#[test]
fn unreachable_endpoint_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("seed.py"), SEED).unwrap();
    // Bind and drop to find a port nobody listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let text = format!(
        r#"seed_program = "seed.py"
[search]
attempt_cap = 3
[backend]
kind = "http"
endpoint = "http://127.0.0.1:{port}/v1"
model = "m"
retries = 1
initial_backoff_ms = 1
[evaluator]
kind = "synthetic"
[output]
trace = "t.jsonl"
"#
    );
    fs::write(dir.path().join("run.toml"), text).unwrap();
    let (code, _, err) = spark(&["run", "--config", "run.toml"], dir.path());
    assert_eq!(code, 4, "{err}");
}

#[test]
fn audit_reports_each_pair_and_the_rate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("audit/manifest.jsonl");
    let out = dir.path().join("verdicts.jsonl");
    let (code, stdout, err) = spark(
        &["audit", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("entanglement rate: 0.5500 (11/20)"), "{stdout}");
    let verdicts = fs::read_to_string(&out).unwrap();
    assert_eq!(verdicts.lines().count(), 20);
}

fn record(iteration: usize, n_eval: usize, fitness: Option<f64>) -> Value {
    json!({
        "iteration": iteration, "mode": "SPARK", "island": 0, "factor": "ACTION",
        "directive_digest": null, "parent_digest": "p", "child_digest": null,
        "outcome": if fitness.is_some() { "PASS" } else { "FAIL" },
        "failure_type": if fitness.is_some() { Value::Null } else { json!("SYNTAX") },
        "feasible": fitness.is_some(), "prelim_fitness": null, "fitness": fitness,
        "macs": fitness.map(|_| 400_000), "archive_action": null, "migrated": null,
        "entangled": false, "is_factor_local": true, "touched_regions": ["ACTION"],
        "n_eval": n_eval, "llm_calls": 3, "prompt_tokens": 0, "completion_tokens": 0,
        "llm_latency_ms": 0, "wall_ms": 0
    })
}

#[test]
fn report_prints_efficiency_against_reference() {
    let dir = tempfile::tempdir().unwrap();
    // Every attempt is evaluated; the best lands at evaluation 57.
    let text: String = (1..=100usize)
        .map(|i| {
            let n_eval = i + 1;
            let f = if n_eval == 57 { 0.8374 } else { 0.5 };
            record(i, n_eval, Some(f)).to_string() + "\n"
        })
        .collect();
    fs::write(dir.path().join("t.jsonl"), text).unwrap();
    let (code, out, err) = spark(&["report", "t.jsonl", "--reference-evals", "1600"], dir.path());
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("efficiency 28.1× (1600 / 57)"), "{out}");
}

#[test]
fn report_rejects_corrupt_lines_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let mut text = record(1, 1, None).to_string();
    text.push_str("\n{not json\n");
    fs::write(&path, text).unwrap();
    let (code, _, err) = spark(&["report", "t.jsonl"], dir.path());
    assert_eq!(code, 1);
    assert!(err.contains("t.jsonl:2"), "{err}");
}

#[test]
fn simulate_prints_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = spark(
        &["simulate", "--p-valid", "1.0", "--trials", "50", "--attempts", "5", "--out", "sim.json"],
        dir.path(),
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("p_valid^k"));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sim.json")).unwrap()).unwrap();
    for row in report["table"].as_array().unwrap() {
        assert_eq!(row["measured"], 1.0);
    }
    let (code, _, _) = spark(&["simulate", "--p-valid", "0"], dir.path());
    assert_eq!(code, 2);
}

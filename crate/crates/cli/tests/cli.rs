use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use parplan_cli::{cmd_oracle_with, ExitStatus};
use parplan_core::search::{discover, SearchOptions};
use parplan_core::spec::{parse_cluster_spec, parse_job_spec, parse_model_spec};
use parplan_core::{estimate_iteration, workload, CommPlan, ParallelismConfig, Workload};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn specs(dir: &str) -> Vec<String> {
    ["cluster", "model", "job"]
        .iter()
        .flat_map(|k| [format!("--{k}"), fixture(&format!("{dir}/{k}.json")).display().to_string()])
        .collect()
}

fn parplan(args: &[&str], extra: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parplan"))
        .args(args)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn load_workload(dir: &str) -> Workload {
    let read = |k: &str| std::fs::read_to_string(fixture(&format!("{dir}/{k}.json"))).unwrap();
    workload(
        &parse_cluster_spec(&read("cluster")).unwrap(),
        &parse_model_spec(&read("model")).unwrap(),
        &parse_job_spec(&read("job")).unwrap(),
        CommPlan::default(),
    )
    .unwrap()
}

#[test]
fn plan_small() {
    let o = parplan(&["plan"], &specs("small"));
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("config: dp"));
    assert!(text.contains("pruned:"));
}

#[test]
fn plan_large_model_uses_pipeline() {
    let o = parplan(&["plan"], &specs("large_model"));
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(!text.contains(" pp=1 "), "{text}");
    assert!(text.contains("R3"), "{text}");
}

#[test]
fn malformed_cluster_is_invalid() {
    let mut args = specs("small");
    args[1] = fixture("malformed_cluster.json").display().to_string();
    let o = parplan(&["plan"], &args);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("parse error"));
}

#[test]
fn model_too_large_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cluster: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("small/cluster.json")).unwrap()).unwrap();
    cluster["device_memory_bytes"] = 1e6.into();
    let path = dir.path().join("cluster.json");
    std::fs::write(&path, cluster.to_string()).unwrap();
    let mut args = specs("small");
    args[1] = path.display().to_string();
    let o = parplan(&["plan"], &args);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not fit"));
}

#[test]
fn noiseless_static_wall_clock_is_steps_times_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let trace = dir.path().join("run");
    let o = parplan(&["plan", "--emit", plan.to_str().unwrap()], &specs("small"));
    assert_eq!(o.status.code(), Some(0));
    let o = parplan(
        &["simulate", "--noise", "0", "--trace", trace.to_str().unwrap()],
        &specs("small"),
    );
    assert_eq!(o.status.code(), Some(0));
    let w = load_workload("small");
    let c: ParallelismConfig = serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    let total = estimate_iteration(&c, &w).unwrap().total_s;
    let text = std::fs::read_to_string(dir.path().join("run.jsonl")).unwrap();
    let mut sum = 0.0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["iteration_time_s"].as_f64().unwrap(), total);
        sum += total;
    }
    assert_eq!(text.lines().count(), 300);
    assert!(stdout(&o).contains(&format!("wall clock: {sum:.6} s")));
    assert!(dir.path().join("run.csv").exists());
}

#[test]
fn adaptive_slowdown_reports_one_transition() {
    let plan = fixture("narrative/plan.json").display().to_string();
    let o = parplan(&["simulate", "--policy", "adaptive", "--plan", &plan], &specs("narrative"));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("transitions: 1\n"), "{}", stdout(&o));
}

#[test]
fn traces_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let plan = fixture("narrative/plan.json").display().to_string();
    let run = |name: &str, seed: &str| {
        let t = dir.path().join(name);
        let o = parplan(
            &["simulate", "--policy", "adaptive", "--plan", &plan, "--seed", seed, "--trace", t.to_str().unwrap()],
            &specs("narrative"),
        );
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(dir.path().join(format!("{name}.jsonl"))).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
}

#[test]
fn emitted_plan_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    assert_eq!(parplan(&["plan", "--emit", plan.to_str().unwrap()], &specs("small")).status.code(), Some(0));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    parplan(&["simulate", "--trace", a.to_str().unwrap()], &specs("small"));
    parplan(
        &["simulate", "--plan", plan.to_str().unwrap(), "--trace", b.to_str().unwrap()],
        &specs("small"),
    );
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
}

#[test]
fn foreign_plan_is_rejected() {
    let plan = fixture("narrative/plan.json").display().to_string();
    let o = parplan(&["simulate", "--plan", &plan], &specs("small"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_without_events_is_a_tie() {
    let o = parplan(&["compare"], &specs("small"));
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("relative gain: 0.000%"), "{text}");
}

#[test]
fn compare_slowdown_favors_adaptive() {
    let plan = fixture("narrative/plan.json").display().to_string();
    let o = parplan(&["compare", "--plan", &plan], &specs("narrative"));
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let gain: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("relative gain: "))
        .and_then(|g| g.trim_end_matches('%').parse().ok())
        .unwrap();
    assert!(gain > 0.0, "{text}");
}

#[test]
fn selector_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let plan = fixture("narrative/plan.json").display().to_string();
    let cfg = dir.path().join("sel.json");
    std::fs::write(&cfg, r#"{"hysteresis_steps": 5000}"#).unwrap();
    let o = parplan(
        &["simulate", "--policy", "adaptive", "--plan", &plan, "--selector-config", cfg.to_str().unwrap()],
        &specs("narrative"),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("transitions: 0\n"));
    std::fs::write(&cfg, r#"{"hysteresis": 5}"#).unwrap();
    let o = parplan(
        &["simulate", "--policy", "adaptive", "--selector-config", cfg.to_str().unwrap()],
        &specs("narrative"),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_passes() {
    let dir = tempfile::tempdir().unwrap();
    let repro = dir.path().join("repro");
    let o = parplan(&["oracle", "--trials", "100", "--seed", "1", "--repro", repro.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!repro.exists());
}

#[test]
fn oracle_guard() {
    let dir = tempfile::tempdir().unwrap();
    let mut cluster: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("narrative/cluster.json")).unwrap()).unwrap();
    cluster["node_count"] = 4.into();
    let path = dir.path().join("big.json");
    std::fs::write(&path, cluster.to_string()).unwrap();
    let o = parplan(&["oracle", "--cluster", path.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn injected_fault_is_caught_and_dumped() {
    let dir = tempfile::tempdir().unwrap();
    let repro = dir.path().join("repro");
    // A search that overstates every cost by 1%.
    let faulty = |w: &Workload, o: &SearchOptions| {
        discover(w, o).map(|mut r| {
            r.best_cost.total_s *= 1.01;
            r
        })
    };
    let mut out = Vec::new();
    let status = cmd_oracle_with(None, 20, 1, &repro, faulty, &mut out).unwrap();
    assert_eq!(status, ExitStatus::Mismatch);
    for f in ["cluster.json", "model.json", "job.json", "instance.json"] {
        assert!(repro.join(f).exists(), "{f}");
    }
    // The dump is a valid input set for the planner.
    let args: Vec<String> = ["cluster", "model", "job"]
        .iter()
        .flat_map(|k| [format!("--{k}"), repro.join(format!("{k}.json")).display().to_string()])
        .collect();
    assert_eq!(parplan(&["plan"], &args).status.code(), Some(0));
}

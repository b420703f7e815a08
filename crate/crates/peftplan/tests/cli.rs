//! End-to-end checks of the command-line binary: subcommand behavior,
//! exit-code contract, and byte-determinism of the emitted documents.

mod common;

use common::*;
use peftplan::report::PlanReport;
use peftplan::resimulate;
use peftplan::workload::Workload;
use std::path::PathBuf;

fn samples_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../samples")
        .canonicalize()
        .unwrap()
}

fn sample_args(dir: &tempfile::TempDir) -> (String, String, String) {
    let samples = samples_dir();
    (
        samples.join("workload.json").to_str().unwrap().to_string(),
        samples.join("profile.csv").to_str().unwrap().to_string(),
        dir.path().join("plan.json").to_str().unwrap().to_string(),
    )
}

#[test]
fn plan_writes_a_report_and_prints_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (wl, prof, out) = sample_args(&dir);
    let (code, stdout, stderr) = run_cli(&["plan", "--workload", &wl, "--profile", &prof, "--out", &out]);
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("report written to"));
    let text = std::fs::read_to_string(&out).unwrap();
    let report = PlanReport::from_json(&text).unwrap();
    assert!(!report.template.bucket_order.is_empty());
    assert_eq!(
        report.simulated.makespan_ms,
        resimulate(&report).unwrap().makespan_ms,
        "stored makespan must survive a JSON round-trip re-simulation"
    );
}

#[test]
fn plan_without_out_prints_the_full_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let (wl, prof, _) = sample_args(&dir);
    let (code, stdout, _) = run_cli(&["plan", "--workload", &wl, "--profile", &prof]);
    assert_eq!(code, 0);
    let report = PlanReport::from_json(&stdout).unwrap();
    assert!(!report.sorted_task_ids.is_empty());
}

#[test]
fn missing_input_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let (_, prof, _) = sample_args(&dir);
    let ghost = dir.path().join("absent.json");
    let (code, _, stderr) = run_cli(&[
        "plan",
        "--workload",
        ghost.to_str().unwrap(),
        "--profile",
        &prof,
    ]);
    assert_eq!(code, 1, "stderr: {stderr}");
}

#[test]
fn unknown_operator_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let workload = Workload {
        backbone: four_stage_backbone(),
        tasks: vec![task_with("t0", 2, 128, vec![128, 64], &["proj"])],
        planner: roomy_planner(2),
    };
    let wl = dir.path().join("workload.json");
    std::fs::write(&wl, serde_json::to_string(&workload).unwrap()).unwrap();
    // profile lacks the adapter operator the task references
    let prof = dir.path().join("profile.csv");
    let text: String = wide_profile_text()
        .lines()
        .filter(|l| !l.starts_with("lora"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&prof, text).unwrap();
    let (code, _, stderr) = run_cli(&[
        "plan",
        "--workload",
        wl.to_str().unwrap(),
        "--profile",
        prof.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("lora"), "stderr should name the operator: {stderr}");
}

#[test]
fn corrupted_plan_report_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("plan.json");
    std::fs::write(&junk, "{\"not\": \"a plan\"").unwrap();
    let (code, _, _) = run_cli(&["simulate", junk.to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn infeasible_memory_exits_3() {
    // Six tasks with fat gradient state: each fits the backbone alone
    // (validation passes), but their co-resident optimizer state leaves no
    // room for even one in-flight micro-batch at any bucket count.
    //   per task alone: 1GiB/4 + 256MiB/4 + activations ≈ 0.32 GiB
    //   co-scheduled:   1GiB/4 + 6·256MiB/4 ≈ 0.63 GiB of static state
    let dir = tempfile::tempdir().unwrap();
    let tasks: Vec<_> = (0..6)
        .map(|i| {
            let mut t = task_with(&format!("fat{i}"), 2, 64, vec![64, 48], &["proj"]);
            t.grad_buffer_bytes = 256 << 20;
            t
        })
        .collect();
    let workload = Workload {
        backbone: four_stage_backbone(),
        tasks,
        planner: roomy_planner(2),
    };
    let wl = dir.path().join("workload.json");
    let prof = dir.path().join("profile.csv");
    std::fs::write(&wl, serde_json::to_string(&workload).unwrap()).unwrap();
    std::fs::write(&prof, wide_profile_text()).unwrap();
    let (code, _, stderr) = run_cli(&[
        "plan",
        "--workload",
        wl.to_str().unwrap(),
        "--profile",
        prof.to_str().unwrap(),
        "--mem-limit-gb",
        "0.5",
    ]);
    assert_eq!(code, 3, "stderr: {stderr}");
    assert!(
        stderr.contains("infeasible: memory"),
        "stderr should explain the memory infeasibility: {stderr}"
    );
}

#[test]
fn simulate_is_byte_deterministic_and_gantt_matches_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let (wl, prof, out) = sample_args(&dir);
    let (code, _, _) = run_cli(&["plan", "--workload", &wl, "--profile", &prof, "--out", &out]);
    assert_eq!(code, 0);

    let (c1, run1, _) = run_cli(&["simulate", &out]);
    let (c2, run2, _) = run_cli(&["simulate", &out]);
    assert_eq!(c1, 0);
    assert_eq!(c2, 0);
    assert_eq!(run1, run2, "two simulations of one report must match byte for byte");

    // line 1: makespan figures; line 2: bubble figures; line 3: gantt header
    let lines: Vec<&str> = run1.lines().collect();
    assert!(lines[0].starts_with("makespan_ms="));
    assert!(lines[1].starts_with("last_stage_idle_steady_ms="));
    assert_eq!(lines[2], "stage, bucket, microbatch, direction, start_ms, end_ms");

    let report = PlanReport::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let schedule = resimulate(&report).unwrap();
    let expected_rows: usize = schedule.events.iter().map(Vec::len).sum();
    assert_eq!(lines.len() - 3, expected_rows);

    // every bucket contributes micro_batches forwards and backwards per stage
    let stages = schedule.events.len();
    let buckets = report.template.bucket_order.len();
    assert_eq!(expected_rows, stages * buckets * report.template.micro_batches * 2);
}

#[test]
fn align_reports_conserved_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let (wl, prof, _) = sample_args(&dir);
    let (code, stdout, stderr) = run_cli(&["align", "--workload", &wl, "--profile", &prof]);
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("effective fraction: chunked="));
    assert!(stdout.lines().any(|l| l.starts_with("htask=")));
}

#[test]
fn replay_runs_are_byte_deterministic_per_mode() {
    let (c1, mux1, _) = run_cli(&["replay", "--mode", "multiplexed", "--seed", "7", "--gpus", "4"]);
    let (c2, mux2, _) = run_cli(&["replay", "--mode", "multiplexed", "--seed", "7", "--gpus", "4"]);
    let (c3, ded, _) = run_cli(&["replay", "--mode", "dedicated", "--seed", "7", "--gpus", "4"]);
    assert_eq!(c1, 0);
    assert_eq!(c2, 0);
    assert_eq!(c3, 0);
    assert_eq!(mux1, mux2, "same seed and mode must replay byte-identically");
    assert_ne!(mux1, ded, "modes must differ in the rendered report");
    assert!(mux1.starts_with("cluster replay: mode=Multiplexed"));
    assert!(ded.starts_with("cluster replay: mode=Dedicated"));
}

#[test]
fn replay_rejects_unknown_mode() {
    let (code, _, stderr) = run_cli(&["replay", "--mode", "sideways"]);
    assert_eq!(code, 2, "stderr: {stderr}");
}

#[test]
fn selftest_passes_end_to_end() {
    let (code, stdout, _) = run_cli(&["selftest"]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS ")).count(), 7);
    assert!(!stdout.contains("FAIL"));
}

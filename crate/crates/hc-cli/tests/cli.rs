//! End-to-end runs of the `hc` binary against the shipped fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hc"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    let mut cmd = hc();
    cmd.args(args);
    cmd.output().expect("spawn hc")
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).expect("utf-8 stderr")
}

fn corpus_arg() -> String {
    fixture("corpus.txt").display().to_string()
}

// ── measure ─────────────────────────────────────────────────────────────

#[test]
fn measure_reports_phi_and_is_reproducible() {
    let input = fixture("sample_input.txt");
    let output_file = fixture("sample_output.txt");
    let args = [
        "measure",
        input.to_str().unwrap(),
        output_file.to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
    ];
    let first = run(&args);
    assert!(first.status.success(), "stderr: {}", stderr(&first));

    let report: serde_json::Value = serde_json::from_str(&stdout(&first)).unwrap();
    let phi = report["phi"].as_f64().unwrap();
    assert!(phi > 0.0 && phi < 1.0, "phi = {phi}");
    assert!(report["self_info"].as_f64().unwrap() > 0.0);
    assert!(report["token_count"].as_u64().unwrap() > 0);
    assert_eq!(report["tau"].as_f64().unwrap(), 0.65);

    // Same invocation, byte-identical output.
    let second = run(&args);
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn measure_agrees_with_the_library() {
    use hc_core::{build_report, LmParams, ReferenceLm, Scorer, ScoringRequest};

    let corpus = std::fs::read_to_string(fixture("corpus.txt")).unwrap();
    let input = std::fs::read_to_string(fixture("sample_input.txt")).unwrap();
    let output_text = std::fs::read_to_string(fixture("sample_output.txt")).unwrap();
    let lm = ReferenceLm::from_corpus(&corpus, LmParams::default()).unwrap();
    let uncond = lm.score(&ScoringRequest::new(&output_text).unwrap()).unwrap();
    let cond = lm
        .score(&ScoringRequest::new(&output_text).unwrap().with_context(input))
        .unwrap();
    let expected = build_report(&uncond, Some(&cond), Some(0.65)).unwrap();

    let result = run(&[
        "measure",
        fixture("sample_input.txt").to_str().unwrap(),
        fixture("sample_output.txt").to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
    ]);
    assert!(result.status.success());
    assert_eq!(
        stdout(&result).trim(),
        serde_json::to_string(&expected).unwrap()
    );
}

#[test]
fn measure_csv_prints_the_documented_header_and_one_row() {
    let result = run(&[
        "measure",
        fixture("sample_input.txt").to_str().unwrap(),
        fixture("sample_output.txt").to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
        "--format",
        "csv",
    ]);
    assert!(result.status.success());
    let text = stdout(&result);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "self_info,cond_self_info,mutual_info,phi,phi_min,token_count,tau,plausible,scorer_id,flags"
    );
    assert_eq!(lines[1].split(',').count(), 10);
}

#[test]
fn measure_missing_file_is_a_usage_error() {
    let result = run(&[
        "measure",
        "no-such-input.txt",
        fixture("sample_output.txt").to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("no-such-input.txt"));
}

#[test]
fn usage_errors_exit_one() {
    // Unknown flag (argument parsing).
    let result = run(&["measure", "--bogus"]);
    assert_eq!(result.status.code(), Some(1));
    // Bad tau.
    let result = run(&[
        "estimate",
        fixture("sample_output.txt").to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
        "--tau",
        "1.5",
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("tau"));
    // Remote backend without an endpoint.
    let result = run(&[
        "estimate",
        fixture("sample_output.txt").to_str().unwrap(),
        "--backend",
        "remote",
    ]);
    assert_eq!(result.status.code(), Some(1));
    // Reference backend without a model source.
    let result = run(&["estimate", fixture("sample_output.txt").to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("--corpus"));
}

#[test]
fn help_exits_zero() {
    let result = run(&["--help"]);
    assert_eq!(result.status.code(), Some(0));
    assert!(stdout(&result).contains("Exit codes"));
}

// ── estimate ────────────────────────────────────────────────────────────

#[test]
fn estimate_at_tau_one_is_exactly_one() {
    let result = run(&[
        "estimate",
        fixture("sample_output.txt").to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
        "--tau",
        "1.0",
    ]);
    assert!(result.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&result)).unwrap();
    assert_eq!(report["phi_min"].as_f64().unwrap(), 1.0);
    assert!(report.get("phi").is_none());
}

#[test]
fn estimate_prints_negative_bounds_unclamped() {
    // A corpus that is one word repeated makes that word's continuation
    // almost certain, so a run of it needs less than N·ln(1/τ) nats and
    // the bound goes negative.
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "tide tide tide tide tide tide tide tide").unwrap();
    let target = dir.path().join("target.txt");
    std::fs::write(&target, "tide tide tide tide tide").unwrap();

    let result = run(&[
        "estimate",
        target.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let report: serde_json::Value = serde_json::from_str(&stdout(&result)).unwrap();
    assert!(
        report["phi_min"].as_f64().unwrap() < 0.0,
        "expected a negative bound, got {}",
        report["phi_min"]
    );
}

// ── batch ───────────────────────────────────────────────────────────────

#[test]
fn batch_writes_results_and_report_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.jsonl");
    let report = dir.path().join("report.json");
    let args = [
        "batch".to_string(),
        fixture("records.jsonl").display().to_string(),
        "--corpus".into(),
        corpus_arg(),
        "--out".into(),
        out.display().to_string(),
        "--report".into(),
        report.display().to_string(),
    ];
    let args: Vec<&str> = args.iter().map(|s| s.as_str()).collect();

    let first = run(&args);
    assert!(first.status.success(), "stderr: {}", stderr(&first));
    assert!(stdout(&first).contains("scored 6 of 6 records (0 failed)"));

    let results_text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(results_text.lines().count(), 6);
    for line in results_text.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(row["phi"].is_f64());
        assert!(row["id"].is_string());
    }
    let report_doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report_doc["meta"]["experiment"], "batch");
    assert!(report_doc["groups"]["polish"]["median"].is_f64());

    let first_results = std::fs::read(&out).unwrap();
    let first_report = std::fs::read(&report).unwrap();
    let second = run(&args);
    assert!(second.status.success());
    assert_eq!(std::fs::read(&out).unwrap(), first_results);
    assert_eq!(std::fs::read(&report).unwrap(), first_report);
}

#[test]
fn batch_with_an_empty_dataset_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("empty.jsonl");
    std::fs::write(&dataset, "").unwrap();
    let out = dir.path().join("results.jsonl");
    let report = dir.path().join("report.json");

    let result = run(&[
        "batch",
        dataset.to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(0));
    assert!(stdout(&result).contains("scored 0 of 0"));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn batch_rejects_malformed_and_duplicate_records() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("bad.jsonl");
    std::fs::write(&dataset, "{\"id\":\"x\"}\n").unwrap();
    let result = run(&[
        "batch",
        dataset.to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("line 1"));

    let record = r#"{"id":"dup","domain":"other","mode":"polish","human_input":"p","output":"o","model_id":"m","temperature":1.0}"#;
    std::fs::write(&dataset, format!("{record}\n{record}\n")).unwrap();
    let result = run(&[
        "batch",
        dataset.to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("duplicate"));
}

// ── synth ───────────────────────────────────────────────────────────────

#[test]
fn synth_levels_writes_reports_and_prints_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.jsonl");
    let report = dir.path().join("report.json");
    let plot = dir.path().join("plot.csv");

    let result = run(&[
        "synth",
        "levels",
        "--corpus",
        &corpus_arg(),
        "--n",
        "6",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--plot-csv",
        plot.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let text = stdout(&result);
    assert!(text.contains("levels-ordering"), "stdout: {text}");
    assert!(text.lines().any(|l| l.starts_with("PASS") || l.starts_with("FAIL")));

    let results_text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(results_text.lines().count(), 18); // 6 records × 3 modes
    let report_doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report_doc["meta"]["experiment"], "levels");
    assert_eq!(report_doc["meta"]["seed"], 3);
    let plot_text = std::fs::read_to_string(&plot).unwrap();
    assert!(plot_text.starts_with("group,count,median,q1,q3,lower_whisker,upper_whisker\n"));
    assert_eq!(plot_text.lines().count(), 4); // header + one row per mode
}

#[test]
fn synth_rejects_zero_n_and_unknown_experiments() {
    let result = run(&[
        "synth", "levels", "--corpus", &corpus_arg(), "--n", "0",
    ]);
    assert_eq!(result.status.code(), Some(1));

    let result = run(&[
        "synth", "entropy", "--corpus", &corpus_arg(), "--n", "5",
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("unknown experiment"));

    let result = run(&[
        "synth", "levels", "--corpus", &corpus_arg(), "--n", "5",
        "--backend", "remote", "--endpoint", "http://x", "--model", "m",
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("reference"));
}

// ── lm-dump ─────────────────────────────────────────────────────────────

#[test]
fn lm_dump_round_trips_through_measure() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("model.lm");
    let result = run(&[
        "lm-dump",
        "--corpus",
        &corpus_arg(),
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    assert!(stdout(&result).contains("reflm-v"));

    let from_corpus = run(&[
        "measure",
        fixture("sample_input.txt").to_str().unwrap(),
        fixture("sample_output.txt").to_str().unwrap(),
        "--corpus",
        &corpus_arg(),
    ]);
    let from_dump = run(&[
        "measure",
        fixture("sample_input.txt").to_str().unwrap(),
        fixture("sample_output.txt").to_str().unwrap(),
        "--lm-file",
        dump.to_str().unwrap(),
    ]);
    assert!(from_dump.status.success());
    assert_eq!(from_corpus.stdout, from_dump.stdout);
}

// ── scoring failures ────────────────────────────────────────────────────

#[test]
fn unreachable_remote_endpoint_exits_two() {
    let result = run(&[
        "measure",
        fixture("sample_input.txt").to_str().unwrap(),
        fixture("sample_output.txt").to_str().unwrap(),
        "--backend",
        "remote",
        "--endpoint",
        "http://127.0.0.1:1",
        "--model",
        "m",
    ]);
    assert_eq!(result.status.code(), Some(2));
    assert!(stderr(&result).contains("error"));
}

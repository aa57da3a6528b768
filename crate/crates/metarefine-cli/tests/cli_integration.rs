//! Black-box tests of the installed binary: exit codes, stdout contracts,
//! and artifact round-trips through the CLI.

use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(rel: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
        .to_string_lossy()
        .into_owned()
}

fn metarefine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metarefine"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stdout_json(output: &Output) -> serde_json::Value {
    serde_json::from_slice(&output.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&output.stdout)
        )
    })
}

#[test]
fn repaired_run_exits_zero_with_a_success_report() {
    let output = metarefine(&[
        "run",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
        "--script", &fixture("tweet_summarizer/script_repair.json"),
    ]);
    assert_eq!(output.status.code(), Some(0));

    let report = stdout_json(&output);
    assert_eq!(report["outcome"], "SUCCESS");
    assert_eq!(report["executions"][0]["attempt"], 4);
    assert_eq!(report["executions"][0]["base_calls"], 4);
    assert_eq!(report["executions"][0]["meta_calls"], 1);
    let tweet = report["outputs"]["summarize"]["tweet"].as_str().unwrap();
    assert!(tweet.contains("generator") && tweet.contains("discriminator"));

    let log = String::from_utf8_lossy(&output.stderr);
    assert!(log.contains("--- META-SELF-REFINING: PING-PONG LOOP DETECTED ---"));
    assert!(log.contains("Competition History:"));
    assert!(log.contains("Synthesized Instruction: "));
    assert!(log.contains("attempt 4 (with guidance)"));
}

#[test]
fn quiet_suppresses_the_progress_log() {
    let output = metarefine(&[
        "run", "--quiet",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
        "--script", &fixture("tweet_summarizer/script_repair.json"),
    ]);
    assert_eq!(output.status.code(), Some(0));
    assert!(output.stderr.is_empty());
}

#[test]
fn soft_accept_exits_two() {
    let output = metarefine(&[
        "run", "--quiet", "--no-meta",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
        "--script", &fixture("tweet_summarizer/script_oscillate.json"),
    ]);
    assert_eq!(output.status.code(), Some(2));
    let report = stdout_json(&output);
    assert_eq!(report["outcome"], "SOFT_ACCEPT");
    assert_eq!(report["executions"][0]["attempt"], 6);
    assert_eq!(report["executions"][0]["violations"][0]["constraint_id"], "keywords");
    // the best attempt's output is still reported
    assert!(report["outputs"]["summarize"]["tweet"].is_string());
}

#[test]
fn hard_fail_exits_three() {
    let output = metarefine(&[
        "run", "--quiet",
        "--pipeline", &fixture("keyword_gate/pipeline.json"),
        "--inputs", &fixture("keyword_gate/inputs.json"),
        "--script", &fixture("keyword_gate/script_fail.json"),
    ]);
    assert_eq!(output.status.code(), Some(3));
    let report = stdout_json(&output);
    assert_eq!(report["outcome"], "HARD_FAIL");
    assert_eq!(report["executions"][0]["violations"][0]["constraint_id"], "required_term");
}

#[test]
fn exhausted_script_aborts_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("empty.json");
    std::fs::write(&script, r#"{"format":"script","format_version":1,"base":[]}"#).unwrap();
    let output = metarefine(&[
        "run", "--quiet",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
        "--script", script.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(3));
    let report = stdout_json(&output);
    assert_eq!(report["outcome"], "ABORTED");
    assert!(report["error"].as_str().unwrap().contains("aborted"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    // missing required --script for the scripted backend
    let output = metarefine(&[
        "run",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("--script"));

    // unknown flag
    let output = metarefine(&["run", "--bogus"]);
    assert_eq!(output.status.code(), Some(1));

    // unreadable pipeline
    let output = metarefine(&[
        "run", "--quiet",
        "--pipeline", "/nonexistent/pipeline.json",
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
        "--script", &fixture("tweet_summarizer/script_repair.json"),
    ]);
    assert_eq!(output.status.code(), Some(1));

    // http backend without an endpoint
    let output = metarefine(&[
        "run", "--quiet", "--backend", "http",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("--endpoint"));

    // http backend pointing at an unset key variable
    let output = metarefine(&[
        "run", "--quiet", "--backend", "http",
        "--endpoint", "http://127.0.0.1:9/v1/chat/completions",
        "--model", "m",
        "--api-key-env", "METAREFINE_CLI_TEST_UNSET_KEY",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("METAREFINE_CLI_TEST_UNSET_KEY"));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(metarefine(&["--help"]).status.code(), Some(0));
    assert_eq!(metarefine(&["--version"]).status.code(), Some(0));
    assert_eq!(metarefine(&["run", "--help"]).status.code(), Some(0));
}

#[test]
fn invalid_pipeline_is_rejected_with_every_problem_listed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    // duplicate module name and a constraint on a missing field
    std::fs::write(
        &path,
        serde_json::json!({
            "format": "pipeline",
            "format_version": 1,
            "pipeline_id": "bad",
            "modules": [
                {
                    "signature": {
                        "name": "m", "instruction": "Do.",
                        "input_fields": [{"name": "x", "description": "x"}],
                        "output_fields": [{"name": "y", "description": "y"}]
                    },
                    "constraints": [{
                        "id": "c", "kind": "SOFT", "target_field": "nope",
                        "predicate": {"type": "max_chars", "limit": 10},
                        "feedback_message": "short"
                    }]
                },
                {
                    "signature": {
                        "name": "m", "instruction": "Do again.",
                        "input_fields": [{"name": "x", "description": "x"}],
                        "output_fields": [{"name": "y", "description": "y"}]
                    },
                    "constraints": []
                }
            ],
            "dataflow": {"m": {"x": "$input.x"}}
        })
        .to_string(),
    )
    .unwrap();

    let output = metarefine(&[
        "run", "--quiet",
        "--pipeline", path.to_str().unwrap(),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
        "--script", &fixture("tweet_summarizer/script_repair.json"),
    ]);
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("is invalid"));
    assert!(err.contains("'m'"), "should name the duplicate module: {err}");
    assert!(err.contains("nope"), "should name the missing target field: {err}");
}

#[test]
fn compile_writes_a_loadable_artifact_and_demos_improve_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let compiled = dir.path().join("compiled.json");

    let output = metarefine(&[
        "compile", "--quiet",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--trainset", &fixture("tweet_summarizer/trainset.json"),
        "--script", &fixture("tweet_summarizer/script_teacher.json"),
        "--out", compiled.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0));
    let report = stdout_json(&output);
    assert_eq!(report["modules"]["summarize"]["demos"], 2);
    assert_eq!(report["modules"]["summarize"]["counter_examples"], 1);
    assert_eq!(report["skipped"], serde_json::json!([]));

    // a fresh run with the demos injected succeeds on the first attempt
    let one_shot = dir.path().join("one_shot.json");
    std::fs::write(
        &one_shot,
        r#"{"format":"script","format_version":1,"base":["tweet: GANs: generator creates data, discriminator detects fakes--adversaries in AI. #AI #GAN"]}"#,
    )
    .unwrap();
    let output = metarefine(&[
        "run", "--quiet",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
        "--script", one_shot.to_str().unwrap(),
        "--demos", compiled.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0));
    let report = stdout_json(&output);
    assert_eq!(report["executions"][0]["attempt"], 1);
}

#[test]
fn demos_for_a_different_pipeline_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let compiled = dir.path().join("compiled.json");
    let output = metarefine(&[
        "compile", "--quiet",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--trainset", &fixture("tweet_summarizer/trainset.json"),
        "--script", &fixture("tweet_summarizer/script_teacher.json"),
        "--out", compiled.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0));

    let output = metarefine(&[
        "run", "--quiet",
        "--pipeline", &fixture("keyword_gate/pipeline.json"),
        "--inputs", &fixture("keyword_gate/inputs.json"),
        "--script", &fixture("keyword_gate/script_fail.json"),
        "--demos", compiled.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("verification"));
}

#[test]
fn stats_summarizes_trace_files_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("run.jsonl");
    let output = metarefine(&[
        "run", "--quiet",
        "--pipeline", &fixture("tweet_summarizer/pipeline.json"),
        "--inputs", &fixture("tweet_summarizer/inputs.json"),
        "--script", &fixture("tweet_summarizer/script_repair.json"),
        "--trace-out", trace.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0));
    let first_line =
        std::fs::read_to_string(&trace).unwrap().lines().next().unwrap().to_string();
    assert!(first_line.contains("\"format\":\"trace\""));

    let output = metarefine(&["stats", trace.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0));
    let table = String::from_utf8_lossy(&output.stdout);
    assert!(table.contains("EXECUTION"));
    assert!(table.contains("tweet_summarizer/summarize"));
    assert!(table.contains("SUCCESS"));

    let output = metarefine(&["stats", trace.to_str().unwrap(), "--format", "json"]);
    assert_eq!(output.status.code(), Some(0));
    let metrics = stdout_json(&output);
    assert_eq!(metrics[0]["base_calls"], 4);
    assert_eq!(metrics[0]["meta_calls"], 1);
    assert_eq!(metrics[0]["loops_detected"], 1);

    // a directory argument picks up the .jsonl files inside
    let output = metarefine(&["stats", dir.path().to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0));

    // a non-trace file is refused
    let output = metarefine(&["stats", &fixture("tweet_summarizer/pipeline.json")]);
    assert_eq!(output.status.code(), Some(1));
}

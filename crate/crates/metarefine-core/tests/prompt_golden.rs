//! Golden transcripts for every prompt the engine renders.
//!
//! The goldens pin the exact wording the models receive; run with
//! `UPDATE_GOLDENS=1` to regenerate after a deliberate wording change, then
//! review the diff like any other code change.

mod common;

use std::fs;
use std::path::PathBuf;

use common::{backend_from, tweet_inputs, tweet_pipeline};
use metarefine_core::{
    bootstrap_demos, execute_module, inject_demos, load_trainset, render_prompt, BudgetConfig,
    ExecutionOptions, Message, Role, RoleTag, Tracer,
};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn transcript(messages: &[Message]) -> String {
    let mut out = String::new();
    for message in messages {
        let role = match message.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        out.push_str(&format!("=== {role} ===\n"));
        out.push_str(&message.content);
        if !message.content.ends_with('\n') {
            out.push('\n');
        }
    }
    out
}

fn assert_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("golden {name} unreadable ({e}); run with UPDATE_GOLDENS=1"));
    assert_eq!(actual, expected, "prompt drifted from golden {name}");
}

/// Run the repair scenario once and capture every prompt the backends saw.
fn repair_prompts() -> (Vec<Vec<Message>>, Vec<Vec<Message>>) {
    let def = tweet_pipeline();
    let backend = backend_from("tweet_summarizer/script_repair.json");
    let mut tracer = Tracer::new(false);
    let options = ExecutionOptions::new(&def.pipeline_id, "summarize");
    execute_module(&def.modules[0], &tweet_inputs(), &[], &backend, &mut tracer, &options)
        .unwrap();
    (backend.prompts(RoleTag::Base), backend.prompts(RoleTag::Meta))
}

#[test]
fn first_attempt_prompt_matches_golden() {
    let (base, _) = repair_prompts();
    assert_golden("first_attempt.txt", &transcript(&base[0]));
}

#[test]
fn informed_retry_prompt_matches_golden() {
    let (base, _) = repair_prompts();
    // attempt 4: three replayed failures plus the pinned balancing instruction
    assert_golden("informed_retry.txt", &transcript(&base[3]));
}

#[test]
fn meta_repair_prompt_matches_golden() {
    let (_, meta) = repair_prompts();
    assert_eq!(meta.len(), 1);
    assert_golden("meta_prompt.txt", &transcript(&meta[0]));
}

#[test]
fn prompt_with_injected_demos_matches_golden() {
    let def = tweet_pipeline();
    let dir = common::fixture_dir().join("tweet_summarizer");
    let trainset = load_trainset(&dir.join("trainset.json")).unwrap();
    let backend = backend_from("tweet_summarizer/script_teacher.json");
    let mut tracer = Tracer::new(false);
    let report = bootstrap_demos(&def, &trainset, &backend, &mut tracer, &BudgetConfig::default());
    assert!(report.skipped.is_empty(), "skipped: {:?}", report.skipped);

    let signature = &def.modules[0].signature;
    let bare = render_prompt(signature, &[], &[], None, &tweet_inputs());
    let injected = inject_demos(bare, &report.compiled, "summarize", signature).unwrap();
    assert_golden("injected_demos.txt", &transcript(&injected));
}

#[test]
fn goldens_carry_no_placeholder_text() {
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        return; // files may still be mid-regeneration in a parallel run
    }
    for name in ["first_attempt.txt", "informed_retry.txt", "meta_prompt.txt", "injected_demos.txt"]
    {
        let content = fs::read_to_string(golden_path(name)).unwrap();
        assert!(content.starts_with("=== system ===\n"), "{name} missing system turn");
        assert!(content.contains("=== user ==="), "{name} missing user turn");
        assert!(!content.contains("TODO"), "{name} contains placeholder text");
    }
}

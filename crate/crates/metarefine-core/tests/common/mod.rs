//! Shared helpers for integration tests: fixture loading and event shorthand.

// each test binary compiles this module separately and uses a subset of it
#![allow(dead_code)]

use std::path::PathBuf;

use metarefine_core::backend::scripted::load_script;
use metarefine_core::{
    load_inputs, load_pipeline, validate_pipeline, FieldMap, PipelineDef, ScriptedBackend,
    TraceEvent,
};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn tweet_pipeline() -> PipelineDef {
    let def = load_pipeline(&fixture_dir().join("tweet_summarizer/pipeline.json")).unwrap();
    assert!(validate_pipeline(&def).is_empty());
    def
}

pub fn tweet_inputs() -> FieldMap {
    load_inputs(&fixture_dir().join("tweet_summarizer/inputs.json")).unwrap()
}

pub fn backend_from(script_file: &str) -> ScriptedBackend {
    let script = load_script(&fixture_dir().join(script_file)).unwrap();
    ScriptedBackend::new(script)
}

pub fn kinds(events: &[TraceEvent]) -> Vec<&'static str> {
    events.iter().map(|e| e.kind.name()).collect()
}

/// The compliant tweet the repair script ends with.
pub const SUCCESS_TWEET: &str =
    "GANs: generator creates data, discriminator detects fakes--adversaries in AI. #AI #GAN";

/// The balancing instruction queued in the repair and teacher scripts.
pub const SCRIPTED_INSTRUCTION: &str =
    "Create a concise tweet under 100 characters that includes the keywords 'GAN', 'generator', and 'discriminator'.";

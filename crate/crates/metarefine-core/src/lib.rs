//! Runtime for declaratively defined LM pipelines with hard and soft output
//! constraints.
//!
//! The engine retries a module's model call with violation feedback until its
//! constraints hold or the backtracking budget runs out. When retries start
//! oscillating between competing constraints instead of converging, the
//! engine detects the cycle, asks a second model for one balancing
//! instruction, and retries with that instruction pinned into the prompt.
//! Successful repairs can be compiled into counter-example demonstrations
//! that teach future runs the trade-off up front.
//!
//! Module map:
//! - [`pipeline`]: signatures, constraints, the predicate DSL, validation
//! - [`prompt`]: chat prompt assembly and completion parsing
//! - [`backend`]: the model interface, with scripted and HTTP implementations
//! - [`engine`]: the refinement loop and budget handling
//! - [`repair`]: oscillation detection and instruction synthesis
//! - [`compile`]: demonstration bootstrapping and injection
//! - [`trace`]: structured events, sinks, and per-run metrics

pub mod backend;
pub mod compile;
pub mod engine;
pub mod files;
pub mod pipeline;
pub mod prompt;
pub mod repair;
pub mod trace;

pub use backend::{
    BackendConfig, BackendError, Completion, HttpBackend, LmBackend, RoleTag, ScriptedBackend,
    ScriptedScript, Usage,
};
pub use compile::{
    bootstrap_demos, demo_messages, inject_demos, load_compiled, load_trainset, persist_compiled,
    save_trainset, verify_compiled, BootstrapReport, CompiledPipeline, Demo, FailingOutput,
    Provenance, SkippedExample, MAX_DEMOS_PER_MODULE,
};
pub use engine::{
    execute_module, execute_pipeline, select_best_attempt, Attempt, BudgetConfig, EngineError,
    ExecutionOptions, ExecutionTrace, Outcome, PipelineRun, DEFAULT_MAX_PERIOD,
    FORMAT_CONSTRAINT_ID,
};
pub use pipeline::{
    check_constraints, evaluate_predicate, load_inputs, load_pipeline, render_feedback,
    save_inputs, save_pipeline, validate_pipeline, Constraint, ConstraintKind, FieldMap,
    FieldSpec, ModuleDef, PipelineDef, PredicateSpec, Signature, Violation,
};
pub use prompt::{parse_output, render_prompt, Message, ParseFailure, PromptMessages, Role};
pub use repair::{
    aggregate_context, build_meta_prompt, detect_loop, fallback_instruction,
    synthesize_instruction, AttemptSummary, CycleDescription, MetaInstruction,
    MetaInstructionSource, StateSnapshot, ViolationSignature, MAX_META_INSTRUCTION_CHARS,
};
pub use trace::{
    metrics_for_stream, validate_event_stream, AttemptKind, ConsoleSink, EventSink, JsonlSink,
    MemorySink, RunMetrics, TraceEvent, TraceEventKind, TraceHeader, Tracer,
};

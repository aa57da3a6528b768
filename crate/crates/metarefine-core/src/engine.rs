//! The refinement engine.
//!
//! One execution runs a module against its constraints under a retry budget.
//! Failed attempts feed their first violation back to the model; when the
//! violation signatures start oscillating, the engine synthesizes a balancing
//! instruction (at most `max_meta_repairs` times) and retries with it. When
//! the budget runs out, the best attempt so far decides the outcome: soft
//! violations only means the output is accepted with them, a hard violation
//! (or an unparseable output) means the execution failed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{LmBackend, RoleTag};
use crate::pipeline::{
    check_constraints, render_feedback, resolve_module_inputs, ConstraintKind, FieldMap,
    ModuleDef, PipelineDef, Violation,
};
use crate::prompt::{parse_output, render_prompt, FeedbackEntry, Message};
use crate::repair::{
    aggregate_context, detect_loop, synthesize_instruction, AttemptSummary, MetaInstruction,
    ViolationSignature,
};
use crate::trace::{AttemptKind, TraceEvent, TraceEventKind, Tracer};

/// Constraint id reserved for outputs that could not be parsed at all. A
/// parse failure consumes retry budget like any other violation but always
/// counts as hard: an unparseable output can never be accepted.
pub const FORMAT_CONSTRAINT_ID: &str = "__format__";

/// Longest oscillation period the engine looks for.
pub const DEFAULT_MAX_PERIOD: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Retries after the first attempt; total attempts = 1 + max_backtracks.
    pub max_backtracks: usize,
    /// Balancing-instruction syntheses allowed per execution.
    pub max_meta_repairs: usize,
    /// When false, oscillation detection and repair are skipped entirely.
    pub meta_enabled: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { max_backtracks: 5, max_meta_repairs: 1, meta_enabled: true }
    }
}

/// One model call and its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    /// 1-based.
    pub index: usize,
    pub kind: AttemptKind,
    /// Raw completion text.
    pub output_text: String,
    /// Parsed output fields; `None` when parsing failed.
    pub fields: Option<FieldMap>,
    pub violations: Vec<Violation>,
    pub signature: ViolationSignature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    /// An attempt satisfied every constraint.
    Success { attempt: usize, output: FieldMap },
    /// Budget exhausted; best attempt violates only soft constraints.
    SoftAccept { attempt: usize, output: FieldMap, violations: Vec<Violation> },
    /// Budget exhausted; best attempt violates a hard constraint or never
    /// parsed.
    HardFail { attempt: usize, output: FieldMap, violations: Vec<Violation> },
}

impl Outcome {
    pub fn output(&self) -> &FieldMap {
        match self {
            Outcome::Success { output, .. }
            | Outcome::SoftAccept { output, .. }
            | Outcome::HardFail { output, .. } => output,
        }
    }
}

/// Full record of one module execution.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub execution_id: String,
    pub module: String,
    pub attempts: Vec<Attempt>,
    /// Every event emitted during the execution, in order.
    pub events: Vec<TraceEvent>,
    pub outcome: Outcome,
    /// The last balancing instruction in force, if any was issued.
    pub meta_instruction: Option<MetaInstruction>,
}

/// The execution could not run to an outcome. Attempts and events up to the
/// abort are preserved for diagnosis.
#[derive(Debug, Error)]
#[error("execution '{execution_id}' aborted on attempt {attempt}: {reason}")]
pub struct EngineError {
    pub execution_id: String,
    pub attempt: usize,
    pub reason: String,
    pub attempts: Vec<Attempt>,
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Clone)]
pub struct ExecutionOptions {
    pub execution_id: String,
    pub pipeline_id: String,
    pub budgets: BudgetConfig,
    /// Backend role serving the refined model's calls (`Teacher` while
    /// bootstrapping demonstrations).
    pub base_role: RoleTag,
    pub max_period: usize,
}

impl ExecutionOptions {
    pub fn new(pipeline_id: &str, module: &str) -> Self {
        Self {
            execution_id: format!("{pipeline_id}/{module}"),
            pipeline_id: pipeline_id.to_string(),
            budgets: BudgetConfig::default(),
            base_role: RoleTag::Base,
            max_period: DEFAULT_MAX_PERIOD,
        }
    }
}

fn format_violation(missing_fields: &[String]) -> Violation {
    Violation {
        constraint_id: FORMAT_CONSTRAINT_ID.to_string(),
        rendered_message: "Output could not be parsed into the expected fields.".to_string(),
        observed: format!("missing fields: {}", missing_fields.join(", ")),
    }
}

fn is_hard_violation(violation: &Violation, module: &ModuleDef) -> bool {
    if violation.constraint_id == FORMAT_CONSTRAINT_ID {
        return true;
    }
    module
        .constraints
        .iter()
        .find(|c| c.id == violation.constraint_id)
        // unknown ids cannot be proven soft, so they count as hard
        .map_or(true, |c| c.kind == ConstraintKind::Hard)
}

fn violation_counts(attempt: &Attempt, module: &ModuleDef) -> (usize, usize) {
    let hard = attempt.violations.iter().filter(|v| is_hard_violation(v, module)).count();
    (hard, attempt.violations.len() - hard)
}

/// Pick the attempt to stand for an exhausted execution: fewest hard
/// violations, then fewest soft; ties go to the latest attempt, which has
/// seen the most feedback.
pub fn select_best_attempt<'a>(attempts: &'a [Attempt], module: &ModuleDef) -> &'a Attempt {
    assert!(!attempts.is_empty(), "an execution always has at least one attempt");
    attempts
        .iter()
        .rev()
        .min_by_key(|attempt| violation_counts(attempt, module))
        .unwrap()
}

/// Run one module to an outcome.
pub fn execute_module(
    module: &ModuleDef,
    inputs: &FieldMap,
    demo_messages: &[Message],
    backend: &dyn LmBackend,
    tracer: &mut Tracer,
    options: &ExecutionOptions,
) -> Result<ExecutionTrace, EngineError> {
    let module_name = module.signature.name.clone();
    let budgets = &options.budgets;
    let max_attempts = 1 + budgets.max_backtracks;

    let mut events: Vec<TraceEvent> = Vec::new();
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut feedback_history: Vec<FeedbackEntry> = Vec::new();
    let mut signatures: Vec<ViolationSignature> = Vec::new();
    let mut meta: Option<MetaInstruction> = None;
    let mut meta_used = 0usize;

    fn emit(
        tracer: &mut Tracer,
        events: &mut Vec<TraceEvent>,
        execution_id: &str,
        module: &str,
        kind: TraceEventKind,
    ) {
        let event = tracer.emit_event(execution_id, module, kind);
        events.push(event);
    }
    let execution_id = options.execution_id.as_str();

    tracer.begin_execution();
    emit(
        tracer,
        &mut events,
        execution_id,
        &module_name,
        TraceEventKind::ExecutionStarted {
            pipeline_id: options.pipeline_id.clone(),
            max_backtracks: budgets.max_backtracks,
            max_meta_repairs: budgets.max_meta_repairs,
            meta_enabled: budgets.meta_enabled,
        },
    );

    for index in 1..=max_attempts {
        let kind = if meta.is_some() { AttemptKind::Meta } else { AttemptKind::Base };
        emit(
            tracer,
            &mut events,
            execution_id,
            &module_name,
            TraceEventKind::AttemptStarted { attempt: index, attempt_kind: kind },
        );

        let prompt = render_prompt(
            &module.signature,
            demo_messages,
            &feedback_history,
            meta.as_ref().map(|m| m.text.as_str()),
            inputs,
        );
        let completion = match backend.complete(options.base_role, &prompt) {
            Ok(completion) => completion,
            Err(err) => {
                let reason = format!("model call failed: {err}");
                emit(
                    tracer,
                    &mut events,
                    execution_id,
                    &module_name,
                    TraceEventKind::ExecutionAborted {
                        reason: reason.clone(),
                        completed_attempts: attempts.len(),
                    },
                );
                return Err(EngineError {
                    execution_id: options.execution_id.clone(),
                    attempt: index,
                    reason,
                    attempts,
                    events,
                });
            }
        };

        let (fields, violations) = match parse_output(&module.signature, &completion.text) {
            Ok(fields) => match check_constraints(&module.constraints, &fields) {
                Ok(violations) => (Some(fields), violations),
                Err(err) => {
                    // cannot happen for validated pipelines; treat as abort
                    let reason = format!("constraint check failed: {err}");
                    emit(
                        tracer,
                        &mut events,
                        execution_id,
                        &module_name,
                        TraceEventKind::ExecutionAborted {
                            reason: reason.clone(),
                            completed_attempts: attempts.len(),
                        },
                    );
                    return Err(EngineError {
                        execution_id: options.execution_id.clone(),
                        attempt: index,
                        reason,
                        attempts,
                        events,
                    });
                }
            },
            Err(parse_failure) => (None, vec![format_violation(&parse_failure.missing_fields)]),
        };

        let signature = ViolationSignature::from_violations(&violations);
        let attempt = Attempt {
            index,
            kind,
            output_text: completion.text.clone(),
            fields: fields.clone(),
            violations: violations.clone(),
            signature: signature.clone(),
        };
        attempts.push(attempt);

        if violations.is_empty() {
            let output = fields.unwrap_or_default();
            emit(
                tracer,
                &mut events,
                execution_id,
                &module_name,
                TraceEventKind::AttemptSucceeded {
                    attempt: index,
                    attempt_kind: kind,
                    output: output.clone(),
                },
            );
            return Ok(ExecutionTrace {
                execution_id: options.execution_id.clone(),
                module: module_name,
                attempts,
                events,
                outcome: Outcome::Success { attempt: index, output },
                meta_instruction: meta,
            });
        }

        emit(
            tracer,
            &mut events,
            execution_id,
            &module_name,
            TraceEventKind::AttemptFailed {
                attempt: index,
                attempt_kind: kind,
                signature: signature.clone(),
                violations: violations.clone(),
                output_text: completion.text.clone(),
            },
        );
        feedback_history.push(FeedbackEntry {
            attempt_index: index,
            output_text: completion.text,
            feedback: render_feedback(&violations[0]),
        });
        signatures.push(signature);

        // A repair is only worth a meta call if a retry remains to use it.
        let retries_remain = index < max_attempts;
        if budgets.meta_enabled && meta_used < budgets.max_meta_repairs && retries_remain {
            if let Some(cycle) = detect_loop(&signatures, options.max_period) {
                emit(
                    tracer,
                    &mut events,
                    execution_id,
                    &module_name,
                    TraceEventKind::LoopDetected { cycle: cycle.clone() },
                );
                let history: Vec<AttemptSummary> = attempts
                    .iter()
                    .map(|a| AttemptSummary {
                        index: a.index,
                        output_text: a.output_text.clone(),
                        violations: a.violations.clone(),
                    })
                    .collect();
                let snapshot = aggregate_context(
                    &module.signature,
                    inputs,
                    &module.constraints,
                    history,
                    cycle,
                );
                let instruction = synthesize_instruction(backend, &snapshot, &module.constraints);
                meta_used += 1;
                emit(
                    tracer,
                    &mut events,
                    execution_id,
                    &module_name,
                    TraceEventKind::MetaInstructionIssued { instruction: instruction.clone() },
                );
                meta = Some(instruction);
            }
        }
    }

    let best = select_best_attempt(&attempts, module);
    let (hard, _) = violation_counts(best, module);
    let best_index = best.index;
    let output = best.fields.clone().unwrap_or_default();
    let violations = best.violations.clone();
    let outcome = if hard > 0 {
        emit(
            tracer,
            &mut events,
            execution_id,
            &module_name,
            TraceEventKind::HardFailed {
                attempt: best_index,
                output: output.clone(),
                violations: violations.clone(),
            },
        );
        Outcome::HardFail { attempt: best_index, output, violations }
    } else {
        emit(
            tracer,
            &mut events,
            execution_id,
            &module_name,
            TraceEventKind::AcceptedWithViolations {
                attempt: best_index,
                output: output.clone(),
                violations: violations.clone(),
            },
        );
        Outcome::SoftAccept { attempt: best_index, output, violations }
    };

    Ok(ExecutionTrace {
        execution_id: options.execution_id.clone(),
        module: module_name,
        attempts,
        events,
        outcome,
        meta_instruction: meta,
    })
}

/// All module executions of one pipeline run, in pipeline order.
#[derive(Debug)]
pub struct PipelineRun {
    pub executions: Vec<ExecutionTrace>,
    /// Outputs of every module that reached Success or SoftAccept.
    pub outputs: BTreeMap<String, FieldMap>,
}

impl PipelineRun {
    /// True when every module ran and satisfied all of its constraints.
    pub fn fully_successful(&self) -> bool {
        self.executions.iter().all(|e| matches!(e.outcome, Outcome::Success { .. }))
    }
}

/// Run every module of a validated pipeline in order, wiring outputs forward.
/// A hard failure stops the run (later modules would consume bad inputs);
/// the executions so far are returned.
pub fn execute_pipeline(
    def: &PipelineDef,
    pipeline_inputs: &FieldMap,
    demos: &BTreeMap<String, Vec<Message>>,
    backend: &dyn LmBackend,
    tracer: &mut Tracer,
    budgets: &BudgetConfig,
) -> Result<PipelineRun, EngineError> {
    let mut run = PipelineRun { executions: Vec::new(), outputs: BTreeMap::new() };
    for module in &def.modules {
        let name = module.signature.name.clone();
        let inputs = resolve_module_inputs(def, &name, pipeline_inputs, &run.outputs)
            .map_err(|reason| EngineError {
                execution_id: format!("{}/{}", def.pipeline_id, name),
                attempt: 0,
                reason,
                attempts: Vec::new(),
                events: Vec::new(),
            })?;
        let mut options = ExecutionOptions::new(&def.pipeline_id, &name);
        options.budgets = budgets.clone();
        let empty = Vec::new();
        let demo_messages = demos.get(&name).unwrap_or(&empty);
        let execution =
            execute_module(module, &inputs, demo_messages, backend, tracer, &options)?;
        let hard_failed = matches!(execution.outcome, Outcome::HardFail { .. });
        if !hard_failed {
            run.outputs.insert(name, execution.outcome.output().clone());
        }
        run.executions.push(execution);
        if hard_failed {
            break;
        }
    }
    Ok(run)
}

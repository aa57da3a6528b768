//! Compile-time demonstration bootstrapping.
//!
//! Training inputs are run through the pipeline with a teacher-role model.
//! Executions that end fully compliant become few-shot demonstrations; the
//! interesting ones are those that needed a balancing instruction on the way,
//! which are stored as counter-examples: the failing output, the instruction
//! that unblocked it, and the compliant revision. Injected into later
//! prompts, they teach the base model how the constraint trade-off was
//! resolved before it starts oscillating itself.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{LmBackend, RoleTag};
use crate::engine::{
    execute_module, BudgetConfig, ExecutionOptions, ExecutionTrace, Outcome,
    FORMAT_CONSTRAINT_ID,
};
use crate::files::{self, FileError, FORMAT_VERSION};
use crate::pipeline::{
    check_constraints, render_feedback, resolve_module_inputs, FieldMap, PipelineDef, Signature,
    Violation,
};
use crate::prompt::{parse_output, render_fields, render_input_fields, Message, PromptMessages};
use crate::repair::MetaInstruction;
use crate::trace::{AttemptKind, Tracer};

/// Demonstration budget per module. Counter-examples are kept in preference
/// to plain successes when there are more candidates than this.
pub const MAX_DEMOS_PER_MODULE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailingOutput {
    /// Raw completion text of the failing attempt.
    pub text: String,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Demo {
    /// A success that needed a balancing instruction: the failure, the
    /// guidance, and the compliant revision.
    CounterExample {
        inputs: FieldMap,
        failing_output: FailingOutput,
        instruction: MetaInstruction,
        successful_output: FieldMap,
    },
    /// A success that needed no repair.
    PlainSuccess {
        inputs: FieldMap,
        successful_output: FieldMap,
    },
}

impl Demo {
    pub fn is_counter_example(&self) -> bool {
        matches!(self, Demo::CounterExample { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_model: String,
    pub created_at_unix: u64,
    pub budgets: BudgetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledPipeline {
    pub format: String,
    pub format_version: u32,
    pub pipeline_id: String,
    pub provenance: Provenance,
    /// Every pipeline module has an entry, possibly empty.
    pub modules: BTreeMap<String, Vec<Demo>>,
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("no compiled demonstrations for module '{0}'")]
    UnknownModule(String),
}

/// One training example that produced no demonstration for a module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedExample {
    /// 1-based index into the training set.
    pub example_index: usize,
    pub module: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct BootstrapReport {
    pub compiled: CompiledPipeline,
    pub skipped: Vec<SkippedExample>,
    pub executions: Vec<ExecutionTrace>,
}

/// Run every training example through the pipeline with the teacher role and
/// collect demonstrations from the executions that ended fully compliant.
///
/// An example that fails (hard failure, backend error) is skipped and
/// recorded; bootstrapping itself never aborts.
pub fn bootstrap_demos(
    def: &PipelineDef,
    trainset: &[FieldMap],
    backend: &dyn LmBackend,
    tracer: &mut Tracer,
    budgets: &BudgetConfig,
) -> BootstrapReport {
    let mut demos: BTreeMap<String, Vec<Demo>> = def
        .modules
        .iter()
        .map(|m| (m.signature.name.clone(), Vec::new()))
        .collect();
    let mut skipped = Vec::new();
    let mut executions = Vec::new();

    for (i, example) in trainset.iter().enumerate() {
        let example_index = i + 1;
        let mut outputs: BTreeMap<String, FieldMap> = BTreeMap::new();
        for module in &def.modules {
            let name = module.signature.name.clone();
            let inputs = match resolve_module_inputs(def, &name, example, &outputs) {
                Ok(inputs) => inputs,
                Err(reason) => {
                    skipped.push(SkippedExample { example_index, module: name, reason });
                    break;
                }
            };
            let mut options = ExecutionOptions::new(&def.pipeline_id, &name);
            options.execution_id =
                format!("{}/{}/train{}", def.pipeline_id, name, example_index);
            options.base_role = RoleTag::Teacher;
            options.budgets = budgets.clone();
            match execute_module(module, &inputs, &[], backend, tracer, &options) {
                Err(err) => {
                    skipped.push(SkippedExample {
                        example_index,
                        module: name,
                        reason: format!("execution aborted: {}", err.reason),
                    });
                    break;
                }
                Ok(trace) => {
                    match &trace.outcome {
                        Outcome::Success { output, .. } => {
                            demos.get_mut(&name).unwrap().push(demo_from_execution(
                                &trace,
                                &inputs,
                                output,
                            ));
                            outputs.insert(name.clone(), output.clone());
                            executions.push(trace);
                        }
                        Outcome::SoftAccept { output, violations, .. } => {
                            skipped.push(SkippedExample {
                                example_index,
                                module: name.clone(),
                                reason: format!(
                                    "accepted with {} soft violation(s); not demonstration quality",
                                    violations.len()
                                ),
                            });
                            // the output is still usable downstream
                            outputs.insert(name.clone(), output.clone());
                            executions.push(trace);
                        }
                        Outcome::HardFail { .. } => {
                            skipped.push(SkippedExample {
                                example_index,
                                module: name.clone(),
                                reason: "hard failure; downstream modules skipped".into(),
                            });
                            executions.push(trace);
                            break;
                        }
                    }
                }
            }
        }
    }

    for entries in demos.values_mut() {
        *entries = cap_demos(std::mem::take(entries));
    }

    let compiled = CompiledPipeline {
        format: "compiled".into(),
        format_version: FORMAT_VERSION,
        pipeline_id: def.pipeline_id.clone(),
        provenance: Provenance {
            teacher_model: backend.model_name(RoleTag::Teacher),
            created_at_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            budgets: budgets.clone(),
        },
        modules: demos,
    };
    debug_assert!(verify_compiled(&compiled, def).is_empty());
    BootstrapReport { compiled, skipped, executions }
}

fn demo_from_execution(trace: &ExecutionTrace, inputs: &FieldMap, output: &FieldMap) -> Demo {
    match &trace.meta_instruction {
        None => Demo::PlainSuccess {
            inputs: inputs.clone(),
            successful_output: output.clone(),
        },
        Some(instruction) => {
            // the failure the guidance fixed: the last failed attempt that ran
            // without it (falling back to the last failure of any kind)
            let failing = trace
                .attempts
                .iter()
                .rev()
                .find(|a| a.kind == AttemptKind::Base && !a.violations.is_empty())
                .or_else(|| trace.attempts.iter().rev().find(|a| !a.violations.is_empty()))
                .expect("a repaired execution has at least one failed attempt");
            Demo::CounterExample {
                inputs: inputs.clone(),
                failing_output: FailingOutput {
                    text: failing.output_text.clone(),
                    violations: failing.violations.clone(),
                },
                instruction: instruction.clone(),
                successful_output: output.clone(),
            }
        }
    }
}

/// Enforce [`MAX_DEMOS_PER_MODULE`], dropping plain successes before
/// counter-examples; order within each class is preserved.
fn cap_demos(demos: Vec<Demo>) -> Vec<Demo> {
    if demos.len() <= MAX_DEMOS_PER_MODULE {
        return demos;
    }
    let (counter_examples, plain): (Vec<Demo>, Vec<Demo>) =
        demos.into_iter().partition(Demo::is_counter_example);
    counter_examples
        .into_iter()
        .chain(plain)
        .take(MAX_DEMOS_PER_MODULE)
        .collect()
}

/// Re-check every stored demonstration against the pipeline it claims to
/// teach. Returns a list of problems; empty means the artifact is sound.
/// Run before persisting and after loading an artifact of uncertain origin.
pub fn verify_compiled(compiled: &CompiledPipeline, def: &PipelineDef) -> Vec<String> {
    let mut problems = Vec::new();
    if compiled.pipeline_id != def.pipeline_id {
        problems.push(format!(
            "artifact is for pipeline '{}', not '{}'",
            compiled.pipeline_id, def.pipeline_id
        ));
    }
    for (module_name, demos) in &compiled.modules {
        let Some(module) = def.module(module_name) else {
            problems.push(format!("module '{module_name}' does not exist in the pipeline"));
            continue;
        };
        for (i, demo) in demos.iter().enumerate() {
            let label = format!("module '{module_name}' demo {}", i + 1);
            let successful_output = match demo {
                Demo::CounterExample { successful_output, .. }
                | Demo::PlainSuccess { successful_output, .. } => successful_output,
            };
            match check_constraints(&module.constraints, successful_output) {
                Err(e) => problems.push(format!("{label}: {e}")),
                Ok(violations) if !violations.is_empty() => {
                    let ids: Vec<&str> =
                        violations.iter().map(|v| v.constraint_id.as_str()).collect();
                    problems.push(format!(
                        "{label}: successful output violates [{}]",
                        ids.join(", ")
                    ));
                }
                Ok(_) => {}
            }
            if let Demo::CounterExample { failing_output, instruction, .. } = demo {
                if instruction.text.trim().is_empty() {
                    problems.push(format!("{label}: empty balancing instruction"));
                }
                if failing_output.violations.is_empty() {
                    problems.push(format!("{label}: failing output records no violations"));
                    continue;
                }
                // the recorded failure must reproduce against today's constraints
                match parse_output(&module.signature, &failing_output.text) {
                    Err(_) => {
                        let all_format = failing_output
                            .violations
                            .iter()
                            .all(|v| v.constraint_id == FORMAT_CONSTRAINT_ID);
                        if !all_format {
                            problems.push(format!(
                                "{label}: failing output does not parse, yet records \
                                 constraint violations"
                            ));
                        }
                    }
                    Ok(fields) => match check_constraints(&module.constraints, &fields) {
                        Err(e) => problems.push(format!("{label}: {e}")),
                        Ok(current) => {
                            let recorded: std::collections::BTreeSet<&str> = failing_output
                                .violations
                                .iter()
                                .map(|v| v.constraint_id.as_str())
                                .collect();
                            let reproduced: std::collections::BTreeSet<&str> =
                                current.iter().map(|v| v.constraint_id.as_str()).collect();
                            if recorded != reproduced {
                                problems.push(format!(
                                    "{label}: failing output violates [{}] today, but [{}] \
                                     was recorded",
                                    reproduced.into_iter().collect::<Vec<_>>().join(", "),
                                    recorded.into_iter().collect::<Vec<_>>().join(", ")
                                ));
                            }
                        }
                    },
                }
            }
        }
    }
    problems
}

pub fn persist_compiled(path: &Path, compiled: &CompiledPipeline) -> Result<(), FileError> {
    files::write_versioned(path, compiled)
}

pub fn load_compiled(path: &Path) -> Result<CompiledPipeline, FileError> {
    files::read_versioned(path, "compiled")
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainsetFile {
    format: String,
    format_version: u32,
    examples: Vec<FieldMap>,
}

/// Load training examples, one input record each.
pub fn load_trainset(path: &Path) -> Result<Vec<FieldMap>, FileError> {
    let file: TrainsetFile = files::read_versioned(path, "trainset")?;
    Ok(file.examples)
}

pub fn save_trainset(path: &Path, examples: &[FieldMap]) -> Result<(), FileError> {
    let file = TrainsetFile {
        format: "trainset".into(),
        format_version: FORMAT_VERSION,
        examples: examples.to_vec(),
    };
    files::write_versioned(path, &file)
}

/// Render a module's stored demonstrations as chat turns: counter-examples
/// first, then plain successes, preserving stored order within each class.
pub fn demo_messages(
    compiled: &CompiledPipeline,
    module: &str,
    signature: &Signature,
) -> Result<Vec<Message>, CompileError> {
    let demos = compiled
        .modules
        .get(module)
        .ok_or_else(|| CompileError::UnknownModule(module.to_string()))?;
    let ordered = demos
        .iter()
        .filter(|d| d.is_counter_example())
        .chain(demos.iter().filter(|d| !d.is_counter_example()));
    let mut messages = Vec::new();
    for demo in ordered {
        match demo {
            Demo::PlainSuccess { inputs, successful_output } => {
                messages.push(Message::user(render_input_fields(signature, inputs)));
                messages.push(Message::assistant(render_fields(signature, successful_output)));
            }
            Demo::CounterExample { inputs, failing_output, instruction, successful_output } => {
                messages.push(Message::user(render_input_fields(signature, inputs)));
                messages.push(Message::assistant(failing_output.text.clone()));
                let feedback = failing_output
                    .violations
                    .first()
                    .map(render_feedback)
                    .unwrap_or_default();
                messages.push(Message::user(format!(
                    "Feedback: {feedback}\nGuidance: {}\nRevise your answer. Address the \
                     feedback above while still following the instruction.\n",
                    instruction.text
                )));
                messages.push(Message::assistant(render_fields(signature, successful_output)));
            }
        }
    }
    Ok(messages)
}

/// Splice a module's demonstrations into an already rendered prompt, after
/// the system message.
pub fn inject_demos(
    prompt: PromptMessages,
    compiled: &CompiledPipeline,
    module: &str,
    signature: &Signature,
) -> Result<PromptMessages, CompileError> {
    let demos = demo_messages(compiled, module, signature)?;
    let mut result = Vec::with_capacity(prompt.len() + demos.len());
    let mut iter = prompt.into_iter();
    match iter.next() {
        Some(system) => {
            result.push(system);
            result.extend(demos);
            result.extend(iter);
        }
        None => result.extend(demos),
    }
    Ok(result)
}

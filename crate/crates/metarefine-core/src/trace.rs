//! Structured run traces.
//!
//! Every engine decision is emitted as a [`TraceEvent`]: attempts, failures,
//! detected loops, synthesized instructions, and exactly one terminal event
//! per execution. Sinks render the same stream in different ways (JSONL for
//! machines, a console log for humans, memory for tests). Timestamps are off
//! by default so that identical runs produce byte-identical trace files.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::pipeline::{FieldMap, PipelineDef, Violation};
use crate::repair::{CycleDescription, MetaInstruction, ViolationSignature};

/// Whether an attempt ran under the base instruction alone or with a
/// balancing instruction appended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttemptKind {
    Base,
    Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceEventKind {
    ExecutionStarted {
        pipeline_id: String,
        max_backtracks: usize,
        max_meta_repairs: usize,
        meta_enabled: bool,
    },
    AttemptStarted {
        attempt: usize,
        attempt_kind: AttemptKind,
    },
    AttemptFailed {
        attempt: usize,
        attempt_kind: AttemptKind,
        signature: ViolationSignature,
        violations: Vec<Violation>,
        output_text: String,
    },
    /// Terminal: the attempt satisfied every constraint.
    AttemptSucceeded {
        attempt: usize,
        attempt_kind: AttemptKind,
        output: FieldMap,
    },
    LoopDetected {
        cycle: CycleDescription,
    },
    #[serde(rename = "META_INSTRUCTION")]
    MetaInstructionIssued {
        instruction: MetaInstruction,
    },
    /// Terminal: budget exhausted, best attempt had only soft violations.
    AcceptedWithViolations {
        attempt: usize,
        output: FieldMap,
        violations: Vec<Violation>,
    },
    /// Terminal: budget exhausted, best attempt still had a hard violation.
    HardFailed {
        attempt: usize,
        output: FieldMap,
        violations: Vec<Violation>,
    },
    /// Terminal: the run could not continue (for example, the base backend
    /// failed). Events emitted before the abort are preserved.
    ExecutionAborted {
        reason: String,
        completed_attempts: usize,
    },
}

impl TraceEventKind {
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            TraceEventKind::AttemptSucceeded { .. }
                | TraceEventKind::AcceptedWithViolations { .. }
                | TraceEventKind::HardFailed { .. }
                | TraceEventKind::ExecutionAborted { .. }
        )
    }

    /// The tag this kind serializes under.
    pub fn name(&self) -> &'static str {
        match self {
            TraceEventKind::ExecutionStarted { .. } => "EXECUTION_STARTED",
            TraceEventKind::AttemptStarted { .. } => "ATTEMPT_STARTED",
            TraceEventKind::AttemptFailed { .. } => "ATTEMPT_FAILED",
            TraceEventKind::AttemptSucceeded { .. } => "ATTEMPT_SUCCEEDED",
            TraceEventKind::LoopDetected { .. } => "LOOP_DETECTED",
            TraceEventKind::MetaInstructionIssued { .. } => "META_INSTRUCTION",
            TraceEventKind::AcceptedWithViolations { .. } => "ACCEPTED_WITH_VIOLATIONS",
            TraceEventKind::HardFailed { .. } => "HARD_FAILED",
            TraceEventKind::ExecutionAborted { .. } => "EXECUTION_ABORTED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// 1-based position within its execution.
    pub sequence_no: u64,
    pub execution_id: String,
    pub module: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp_ms: Option<u64>,
    #[serde(flatten)]
    pub kind: TraceEventKind,
}

/// First line of a JSONL trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub format_version: u32,
    pub pipeline_id: String,
    /// module name -> its constraint ids, in declaration order.
    pub modules: BTreeMap<String, Vec<String>>,
}

impl TraceHeader {
    pub fn for_pipeline(def: &PipelineDef) -> Self {
        let modules = def
            .modules
            .iter()
            .map(|m| {
                let ids = m.constraints.iter().map(|c| c.id.clone()).collect();
                (m.signature.name.clone(), ids)
            })
            .collect();
        Self {
            format: "trace".into(),
            format_version: crate::files::FORMAT_VERSION,
            pipeline_id: def.pipeline_id.clone(),
            modules,
        }
    }
}

pub trait EventSink: Send {
    fn emit(&mut self, event: &TraceEvent);
    /// Flush buffers and surface any deferred I/O error.
    fn finish(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Stamps sequence numbers and timestamps, and fans events out to sinks.
pub struct Tracer {
    sinks: Vec<Box<dyn EventSink>>,
    sequence_no: u64,
    timestamps: bool,
}

impl Tracer {
    pub fn new(timestamps: bool) -> Self {
        Self { sinks: Vec::new(), sequence_no: 0, timestamps }
    }

    pub fn add_sink(&mut self, sink: Box<dyn EventSink>) {
        self.sinks.push(sink);
    }

    /// Reset the sequence counter; call before each execution.
    pub fn begin_execution(&mut self) {
        self.sequence_no = 0;
    }

    /// Stamp and fan out one event, returning the stamped copy.
    pub fn emit_event(
        &mut self,
        execution_id: &str,
        module: &str,
        kind: TraceEventKind,
    ) -> TraceEvent {
        self.sequence_no += 1;
        let timestamp_ms = self.timestamps.then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)
        });
        let event = TraceEvent {
            sequence_no: self.sequence_no,
            execution_id: execution_id.to_string(),
            module: module.to_string(),
            timestamp_ms,
            kind,
        };
        for sink in &mut self.sinks {
            sink.emit(&event);
        }
        event
    }

    pub fn finish(&mut self) -> io::Result<()> {
        let mut first_error = None;
        for sink in &mut self.sinks {
            if let Err(e) = sink.finish() {
                first_error.get_or_insert(e);
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// One JSON object per line; the header record first, then events in emission
/// order. Flushes after every line so a crash loses at most the event being
/// written.
pub struct JsonlSink {
    writer: Box<dyn Write + Send>,
    deferred_error: Option<io::Error>,
}

impl JsonlSink {
    pub fn new(mut writer: Box<dyn Write + Send>, header: &TraceHeader) -> Self {
        let mut deferred_error = None;
        let line = serde_json::to_string(header).expect("header serialization cannot fail");
        if let Err(e) = writeln!(writer, "{line}").and_then(|_| writer.flush()) {
            deferred_error = Some(e);
        }
        Self { writer, deferred_error }
    }

    pub fn to_file(path: &std::path::Path, header: &TraceHeader) -> io::Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(Self::new(Box::new(file), header))
    }
}

impl EventSink for JsonlSink {
    fn emit(&mut self, event: &TraceEvent) {
        if self.deferred_error.is_some() {
            return;
        }
        let line = serde_json::to_string(event).expect("event serialization cannot fail");
        if let Err(e) = writeln!(self.writer, "{line}").and_then(|_| self.writer.flush()) {
            self.deferred_error = Some(e);
        }
    }

    fn finish(&mut self) -> io::Result<()> {
        match self.deferred_error.take() {
            Some(e) => Err(e),
            None => self.writer.flush(),
        }
    }
}

/// Collects events in memory; the handle stays readable after the sink is
/// handed to a [`Tracer`].
pub struct MemorySink {
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl MemorySink {
    pub fn new() -> (Self, Arc<Mutex<Vec<TraceEvent>>>) {
        let events = Arc::new(Mutex::new(Vec::new()));
        (Self { events: events.clone() }, events)
    }
}

impl EventSink for MemorySink {
    fn emit(&mut self, event: &TraceEvent) {
        self.events.lock().unwrap().push(event.clone());
    }
}

const EXCERPT_CHARS: usize = 50;

fn excerpt(text: &str, max: usize) -> String {
    let flat = text.replace('\n', " ");
    if flat.chars().count() <= max {
        flat
    } else {
        let cut: String = flat.chars().take(max).collect();
        format!("{cut}...")
    }
}

/// Human-readable run log. Failed attempts are remembered so that a detected
/// loop can print the full competition history.
pub struct ConsoleSink {
    writer: Box<dyn Write + Send>,
    attempt_lines: Vec<String>,
}

impl ConsoleSink {
    pub fn new(writer: Box<dyn Write + Send>) -> Self {
        Self { writer, attempt_lines: Vec::new() }
    }

    pub fn stderr() -> Self {
        Self::new(Box::new(io::stderr()))
    }
}

impl EventSink for ConsoleSink {
    fn emit(&mut self, event: &TraceEvent) {
        let module = &event.module;
        let w = &mut self.writer;
        let _ = match &event.kind {
            TraceEventKind::ExecutionStarted { pipeline_id, max_backtracks, .. } => {
                self.attempt_lines.clear();
                writeln!(w, "[{module}] refining ({pipeline_id}, max backtracks {max_backtracks})")
            }
            TraceEventKind::AttemptStarted { attempt, attempt_kind } => match attempt_kind {
                AttemptKind::Base => writeln!(w, "[{module}] attempt {attempt}"),
                AttemptKind::Meta => writeln!(w, "[{module}] attempt {attempt} (with guidance)"),
            },
            TraceEventKind::AttemptFailed { attempt, signature, violations, output_text, .. } => {
                self.attempt_lines.push(format!(
                    "  Attempt {attempt} violated {signature}: {}",
                    excerpt(output_text, EXCERPT_CHARS)
                ));
                let feedback = violations
                    .first()
                    .map(crate::pipeline::render_feedback)
                    .unwrap_or_default();
                writeln!(w, "[{module}] attempt {attempt} FAILED {signature}: {feedback}")
            }
            TraceEventKind::AttemptSucceeded { attempt, output, .. } => {
                let mut result = writeln!(w, "[{module}] attempt {attempt} SUCCEEDED");
                for (name, value) in output {
                    result = result.and_then(|_| writeln!(w, "    {name}: {value}"));
                }
                result
            }
            TraceEventKind::LoopDetected { cycle } => {
                let mut result =
                    writeln!(w, "--- META-SELF-REFINING: PING-PONG LOOP DETECTED ---");
                result = result.and_then(|_| {
                    writeln!(w, "Period {} cycle after attempt {}.", cycle.period,
                        cycle.detected_at_attempt)
                });
                result = result.and_then(|_| writeln!(w, "Competition History:"));
                for line in &self.attempt_lines {
                    result = result.and_then(|_| writeln!(w, "{line}"));
                }
                result
            }
            TraceEventKind::MetaInstructionIssued { instruction } => {
                let mut result =
                    writeln!(w, "Synthesized Instruction: {}", instruction.text);
                if let Some(reason) = &instruction.fallback_reason {
                    result = result.and_then(|_| writeln!(w, "  (fallback used: {reason})"));
                }
                result.and_then(|_| writeln!(w, "---"))
            }
            TraceEventKind::AcceptedWithViolations { attempt, violations, .. } => {
                writeln!(
                    w,
                    "[{module}] budget exhausted; accepted attempt {attempt} with {} soft violation(s)",
                    violations.len()
                )
            }
            TraceEventKind::HardFailed { attempt, violations, .. } => {
                writeln!(
                    w,
                    "[{module}] FAILED: best attempt {attempt} still violates {} constraint(s)",
                    violations.len()
                )
            }
            TraceEventKind::ExecutionAborted { reason, completed_attempts } => {
                writeln!(w, "[{module}] ABORTED after {completed_attempts} attempt(s): {reason}")
            }
        };
    }

    fn finish(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

/// Aggregate numbers for one execution, computed from its event stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub execution_id: String,
    pub module: String,
    /// SUCCESS, SOFT_ACCEPT, HARD_FAIL, ABORTED, or INCOMPLETE.
    pub outcome: String,
    /// Base-model calls (one per attempt).
    pub base_calls: usize,
    /// Balancing-instruction syntheses (one meta-model call each).
    pub meta_calls: usize,
    pub loops_detected: usize,
    /// Attempt the terminal event points at, when there is one.
    pub terminal_attempt: Option<usize>,
    pub violations_at_termination: Vec<String>,
}

/// Compute per-execution metrics from a mixed event stream, grouping by
/// execution id in first-seen order.
pub fn metrics_for_stream(events: &[TraceEvent]) -> Vec<RunMetrics> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<&TraceEvent>> = BTreeMap::new();
    for event in events {
        if !grouped.contains_key(&event.execution_id) {
            order.push(event.execution_id.clone());
        }
        grouped.entry(event.execution_id.clone()).or_default().push(event);
    }
    order
        .into_iter()
        .map(|id| {
            let events = &grouped[&id];
            let module =
                events.first().map(|e| e.module.clone()).unwrap_or_default();
            let mut metrics = RunMetrics {
                execution_id: id,
                module,
                outcome: "INCOMPLETE".into(),
                base_calls: 0,
                meta_calls: 0,
                loops_detected: 0,
                terminal_attempt: None,
                violations_at_termination: Vec::new(),
            };
            for event in events {
                match &event.kind {
                    TraceEventKind::AttemptStarted { .. } => metrics.base_calls += 1,
                    TraceEventKind::LoopDetected { .. } => metrics.loops_detected += 1,
                    TraceEventKind::MetaInstructionIssued { .. } => metrics.meta_calls += 1,
                    TraceEventKind::AttemptSucceeded { attempt, .. } => {
                        metrics.outcome = "SUCCESS".into();
                        metrics.terminal_attempt = Some(*attempt);
                    }
                    TraceEventKind::AcceptedWithViolations { attempt, violations, .. } => {
                        metrics.outcome = "SOFT_ACCEPT".into();
                        metrics.terminal_attempt = Some(*attempt);
                        metrics.violations_at_termination =
                            violations.iter().map(|v| v.constraint_id.clone()).collect();
                    }
                    TraceEventKind::HardFailed { attempt, violations, .. } => {
                        metrics.outcome = "HARD_FAIL".into();
                        metrics.terminal_attempt = Some(*attempt);
                        metrics.violations_at_termination =
                            violations.iter().map(|v| v.constraint_id.clone()).collect();
                    }
                    TraceEventKind::ExecutionAborted { .. } => {
                        metrics.outcome = "ABORTED".into();
                    }
                    _ => {}
                }
            }
            metrics
        })
        .collect()
}

/// Structural invariants of one execution's event slice. Returns the first
/// problem found, or `Ok` for a well-formed stream.
pub fn validate_event_stream(events: &[TraceEvent]) -> Result<(), String> {
    if events.is_empty() {
        return Err("event stream is empty".into());
    }
    let execution_id = &events[0].execution_id;
    if !matches!(events[0].kind, TraceEventKind::ExecutionStarted { .. }) {
        return Err("stream does not begin with EXECUTION_STARTED".into());
    }
    let mut failed_attempts = 0usize;
    let mut started: Vec<usize> = Vec::new();
    let mut loop_seen = false;
    for (i, event) in events.iter().enumerate() {
        if event.execution_id != *execution_id {
            return Err(format!(
                "event {} belongs to execution '{}', expected '{}'",
                i + 1,
                event.execution_id,
                execution_id
            ));
        }
        if event.sequence_no != (i as u64) + 1 {
            return Err(format!(
                "event {} has sequence_no {}, expected {}",
                i + 1,
                event.sequence_no,
                i + 1
            ));
        }
        if i > 0 && matches!(event.kind, TraceEventKind::ExecutionStarted { .. }) {
            return Err("EXECUTION_STARTED appears more than once".into());
        }
        if event.kind.is_terminal() && i + 1 != events.len() {
            return Err(format!("terminal event {} is not last", event.kind.name()));
        }
        match &event.kind {
            TraceEventKind::AttemptStarted { attempt, .. } => {
                if *attempt != started.len() + 1 {
                    return Err(format!(
                        "attempt numbers must increase by 1; saw {attempt} after {}",
                        started.len()
                    ));
                }
                started.push(*attempt);
            }
            TraceEventKind::AttemptFailed { attempt, .. }
            | TraceEventKind::AttemptSucceeded { attempt, .. } => {
                if !started.contains(attempt) {
                    return Err(format!("attempt {attempt} finished without being started"));
                }
                if matches!(event.kind, TraceEventKind::AttemptFailed { .. }) {
                    failed_attempts += 1;
                }
            }
            TraceEventKind::LoopDetected { cycle } => {
                if cycle.detected_at_attempt != failed_attempts {
                    return Err(format!(
                        "loop detected at attempt {}, but {} attempts had failed",
                        cycle.detected_at_attempt, failed_attempts
                    ));
                }
                loop_seen = true;
            }
            TraceEventKind::MetaInstructionIssued { .. } => {
                if !loop_seen {
                    return Err("META_INSTRUCTION without a prior LOOP_DETECTED".into());
                }
            }
            _ => {}
        }
    }
    if !events.last().map(|e| e.kind.is_terminal()).unwrap_or(false) {
        return Err("stream does not end with a terminal event".into());
    }
    Ok(())
}

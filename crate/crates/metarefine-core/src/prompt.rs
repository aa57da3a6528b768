//! Prompt assembly and completion parsing.
//!
//! The layout is deliberately rigid so that prompts are reproducible
//! byte-for-byte: the system message carries the instruction and the expected
//! output format, demonstrations (if any) sit between the system message and
//! the live request, and the final user message replays earlier failed
//! attempts with their feedback before restating the inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{FieldMap, Signature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// An ordered chat transcript ready to send to a backend.
pub type PromptMessages = Vec<Message>;

/// Header of the block that carries a synthesized balancing instruction.
/// It is appended to the system message and outranks nothing structurally;
/// its authority comes from being the last word in the system prompt.
pub const PRIORITY_GUIDANCE_HEADER: &str = "=== PRIORITY GUIDANCE ===";

/// One earlier failed attempt, replayed to the model on retry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackEntry {
    /// 1-based attempt number the feedback refers to.
    pub attempt_index: usize,
    /// Raw completion text of that attempt.
    pub output_text: String,
    /// Rendered feedback for the first violation of that attempt.
    pub feedback: String,
}

/// Build the full chat prompt for one attempt.
///
/// `demo_messages` are pre-rendered demonstration turns inserted between the
/// system message and the live request. `feedback_history` lists earlier
/// failed attempts oldest-first. A `meta_instruction`, once present, stays in
/// the system message for every later attempt.
pub fn render_prompt(
    signature: &Signature,
    demo_messages: &[Message],
    feedback_history: &[FeedbackEntry],
    meta_instruction: Option<&str>,
    inputs: &FieldMap,
) -> PromptMessages {
    let mut messages = Vec::with_capacity(demo_messages.len() + 2);
    messages.push(Message::system(render_system(signature, meta_instruction)));
    messages.extend(demo_messages.iter().cloned());
    messages.push(Message::user(render_user_turn(signature, feedback_history, inputs)));
    messages
}

fn render_system(signature: &Signature, meta_instruction: Option<&str>) -> String {
    let mut out = String::new();
    out.push_str(&signature.instruction);
    out.push_str("\n\nOutput format:\n");
    for field in &signature.output_fields {
        out.push_str(&format!("{}: <{}>\n", field.name, field.description));
    }
    if let Some(meta) = meta_instruction {
        out.push('\n');
        out.push_str(PRIORITY_GUIDANCE_HEADER);
        out.push('\n');
        out.push_str(meta);
        out.push('\n');
    }
    out
}

fn render_user_turn(
    signature: &Signature,
    feedback_history: &[FeedbackEntry],
    inputs: &FieldMap,
) -> String {
    let mut out = String::new();
    for entry in feedback_history {
        out.push_str(&format!("Previous attempt {}:\n", entry.attempt_index));
        out.push_str(entry.output_text.trim_end());
        out.push_str("\nFeedback: ");
        out.push_str(&entry.feedback);
        out.push_str("\n\n");
    }
    if !feedback_history.is_empty() {
        out.push_str(
            "Revise your answer. Address the feedback above while still following the instruction.\n\n",
        );
    }
    out.push_str(&render_input_fields(signature, inputs));
    out
}

/// Render inputs as `name: value` lines in signature order.
pub fn render_input_fields(signature: &Signature, inputs: &FieldMap) -> String {
    let mut out = String::new();
    for field in &signature.input_fields {
        let value = inputs.get(&field.name).map(String::as_str).unwrap_or("");
        out.push_str(&format!("{}: {}\n", field.name, value));
    }
    out
}

/// Render outputs as `name: value` lines in signature order; the inverse of
/// [`parse_output`] for values that do not themselves contain marker lines.
pub fn render_fields(signature: &Signature, outputs: &FieldMap) -> String {
    let mut out = String::new();
    for field in &signature.output_fields {
        let value = outputs.get(&field.name).map(String::as_str).unwrap_or("");
        out.push_str(&format!("{}: {}\n", field.name, value));
    }
    out
}

/// The completion could not be mapped onto the signature's output fields.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("completion is missing output fields: {}", missing_fields.join(", "))]
pub struct ParseFailure {
    /// Output fields with no parsed value, in signature order.
    pub missing_fields: Vec<String>,
}

/// Map a raw completion onto the signature's output fields.
///
/// A line starting with `<field>:` (after optional leading whitespace) opens
/// that field's value, which extends until the next marker line. The first
/// occurrence of a field wins. When no marker is present at all and the
/// signature has a single output field, the whole trimmed completion is taken
/// as that field's value; an entirely empty completion still fails.
pub fn parse_output(signature: &Signature, text: &str) -> Result<FieldMap, ParseFailure> {
    let field_names: Vec<&str> =
        signature.output_fields.iter().map(|f| f.name.as_str()).collect();

    let mut fields = FieldMap::new();
    let mut current: Option<(&str, Vec<&str>)> = None;
    let mut saw_marker = false;

    for line in text.lines() {
        let trimmed = line.trim_start();
        let marker = field_names.iter().find_map(|name| {
            trimmed
                .strip_prefix(name)
                .and_then(|rest| rest.strip_prefix(':'))
                .map(|value| (*name, value))
        });
        match marker {
            Some((name, first)) => {
                saw_marker = true;
                flush(&mut fields, current.take());
                current = Some((name, vec![first.trim_start()]));
            }
            None => {
                if let Some((_, lines)) = current.as_mut() {
                    lines.push(line);
                }
            }
        }
    }
    flush(&mut fields, current.take());

    if !saw_marker && field_names.len() == 1 {
        let whole = text.trim();
        if !whole.is_empty() {
            fields.insert(field_names[0].to_string(), whole.to_string());
        }
    }

    let missing: Vec<String> = field_names
        .iter()
        .filter(|name| !fields.contains_key(**name))
        .map(|name| name.to_string())
        .collect();
    if missing.is_empty() {
        Ok(fields)
    } else {
        Err(ParseFailure { missing_fields: missing })
    }
}

fn flush(fields: &mut FieldMap, segment: Option<(&str, Vec<&str>)>) {
    if let Some((name, lines)) = segment {
        if !fields.contains_key(name) {
            fields.insert(name.to_string(), lines.join("\n").trim().to_string());
        }
    }
}

//! Oscillation detection and balancing-instruction synthesis.
//!
//! A refinement run can get stuck trading one violation for another: fixing
//! the length breaks the keyword requirement, fixing the keywords breaks the
//! length, and the retry budget burns down with no progress. This module
//! recognizes that pattern from the history of violation signatures, packages
//! the whole competition into a [`StateSnapshot`], and asks a second model for
//! one instruction that addresses all competing constraints at once. If that
//! call fails in any way, a deterministic fallback instruction is produced
//! instead; synthesis never aborts a run.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{LmBackend, RoleTag};
use crate::pipeline::{Constraint, ConstraintKind, FieldMap, Signature, Violation};
use crate::prompt::{Message, PromptMessages};

/// Upper bound, in Unicode code points, on a balancing instruction. A longer
/// synthesized text is discarded in favor of the fallback so the system
/// prompt cannot grow without bound.
pub const MAX_META_INSTRUCTION_CHARS: usize = 2000;

/// The set of constraint ids an attempt violated. Order and multiplicity are
/// irrelevant: two attempts with the same signature failed in the same way.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViolationSignature(pub BTreeSet<String>);

impl ViolationSignature {
    pub fn from_violations(violations: &[Violation]) -> Self {
        Self(violations.iter().map(|v| v.constraint_id.clone()).collect())
    }

    pub fn from_ids<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        Self(ids.into_iter().map(Into::into).collect())
    }
}

impl fmt::Display for ViolationSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<&str> = self.0.iter().map(String::as_str).collect();
        write!(f, "{{{}}}", ids.join(", "))
    }
}

/// A detected oscillation in the violation-signature history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleDescription {
    /// Number of attempts after which the failure mode repeats.
    pub period: usize,
    /// 1-based attempt number whose signature closed the cycle.
    pub detected_at_attempt: usize,
    /// One full cycle of signatures, oldest first (`period` entries).
    pub signatures: Vec<ViolationSignature>,
}

/// Scan a violation-signature history (oldest first, one entry per failed
/// attempt) for an oscillation.
///
/// A period-`p` loop is reported when the latest signature equals the one `p`
/// attempts earlier and the trailing `p + 1` entries contain at least two
/// distinct signatures. The distinctness requirement separates oscillation
/// from stagnation: an attempt that fails identically every time is not
/// trading violations, and feeding it a balancing instruction would be
/// answering the wrong question. Periods are tried smallest first, from 2 to
/// `max_period`; period 1 is stagnation by definition and never reported.
pub fn detect_loop(
    history: &[ViolationSignature],
    max_period: usize,
) -> Option<CycleDescription> {
    let n = history.len();
    for period in 2..=max_period {
        if n < period + 1 {
            break; // longer periods need even more history
        }
        if history[n - 1] != history[n - 1 - period] {
            continue;
        }
        let window = &history[n - 1 - period..];
        let distinct: BTreeSet<&ViolationSignature> = window.iter().collect();
        if distinct.len() < 2 {
            continue;
        }
        return Some(CycleDescription {
            period,
            detected_at_attempt: n,
            signatures: history[n - period..].to_vec(),
        });
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSummary {
    pub id: String,
    pub kind: ConstraintKind,
    pub predicate: String,
    pub message: String,
}

impl ConstraintSummary {
    pub fn from_constraint(constraint: &Constraint) -> Self {
        Self {
            id: constraint.id.clone(),
            kind: constraint.kind,
            predicate: constraint.predicate.to_string(),
            message: constraint.rendered_message(),
        }
    }
}

/// One failed attempt as seen by the meta-repairer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptSummary {
    /// 1-based attempt number.
    pub index: usize,
    pub output_text: String,
    pub violations: Vec<Violation>,
}

/// Everything the meta-repairer is shown, in one serializable record. Its
/// digest identifies the synthesis context in traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub module: String,
    pub base_instruction: String,
    pub input_fields: Vec<String>,
    pub output_fields: Vec<String>,
    pub inputs: FieldMap,
    pub constraints: Vec<ConstraintSummary>,
    /// All failed attempts so far, oldest first.
    pub history: Vec<AttemptSummary>,
    pub cycle: CycleDescription,
}

impl StateSnapshot {
    /// Hex SHA-256 of the canonical JSON serialization. Struct fields and
    /// `BTreeMap` keys serialize in a fixed order, so equal snapshots always
    /// digest identically.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("snapshot serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Collect the full competition context for a detected cycle.
///
/// `history` must list every failed attempt so far, oldest first; a cycle can
/// only have been detected with at least `period + 1` of them.
pub fn aggregate_context(
    signature: &Signature,
    inputs: &FieldMap,
    constraints: &[Constraint],
    history: Vec<AttemptSummary>,
    cycle: CycleDescription,
) -> StateSnapshot {
    debug_assert!(history.len() >= cycle.period + 1);
    debug_assert!(history.len() >= cycle.detected_at_attempt);
    StateSnapshot {
        module: signature.name.clone(),
        base_instruction: signature.instruction.clone(),
        input_fields: signature.input_fields.iter().map(|f| f.name.clone()).collect(),
        output_fields: signature.output_fields.iter().map(|f| f.name.clone()).collect(),
        inputs: inputs.clone(),
        constraints: constraints.iter().map(ConstraintSummary::from_constraint).collect(),
        history,
        cycle,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MetaInstructionSource {
    /// Produced by the meta model.
    Synthesized,
    /// Deterministic conjunction of the constraint messages, used when the
    /// meta model fails or returns unusable text.
    Fallback,
}

/// A balancing instruction ready to be appended to the system prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaInstruction {
    pub text: String,
    pub source: MetaInstructionSource,
    /// Digest of the [`StateSnapshot`] the instruction was synthesized from.
    pub snapshot_digest: String,
    /// Why the fallback was used; `None` for synthesized instructions.
    pub fallback_reason: Option<String>,
}

/// Render the chat prompt shown to the meta model: the constraint roster,
/// the competition history, the detected pattern, and the request.
pub fn build_meta_prompt(snapshot: &StateSnapshot) -> PromptMessages {
    let system = "You are repairing the prompt of another model that is stuck alternating \
                  between constraint violations. Study the competition history, then write ONE \
                  new instruction that satisfies every constraint at the same time. Respond with \
                  the instruction text only.";

    let mut user = String::new();
    user.push_str(&format!("Module: {}\n", snapshot.module));
    user.push_str(&format!("Base instruction: {}\n\n", snapshot.base_instruction));

    user.push_str("Inputs:\n");
    for (name, value) in &snapshot.inputs {
        user.push_str(&format!("{name}: {value}\n"));
    }
    user.push('\n');

    user.push_str("Constraints:\n");
    for c in &snapshot.constraints {
        user.push_str(&format!("- [{}] {}: {} -- {}\n", c.kind, c.id, c.predicate, c.message));
    }
    user.push('\n');

    user.push_str("Competition history:\n");
    for attempt in &snapshot.history {
        let signature = ViolationSignature::from_violations(&attempt.violations);
        user.push_str(&format!("Attempt {} violated {}:\n", attempt.index, signature));
        user.push_str(attempt.output_text.trim_end());
        user.push('\n');
        for violation in &attempt.violations {
            user.push_str(&format!("- {}\n", crate::pipeline::render_feedback(violation)));
        }
    }
    user.push('\n');

    user.push_str(&format!("Detected pattern: {}\n\n", describe_cycle(&snapshot.cycle)));
    user.push_str(
        "Write one concise instruction that makes the next attempt satisfy ALL constraints \
         simultaneously. Respond with the instruction only.",
    );

    vec![Message::system(system), Message::user(user)]
}

fn describe_cycle(cycle: &CycleDescription) -> String {
    let rendered: Vec<String> = cycle.signatures.iter().map(|s| s.to_string()).collect();
    if cycle.period == 2 {
        format!(
            "the last attempts alternate with period 2 between {} and {}; fixing one violation \
             keeps reintroducing the other",
            rendered[0], rendered[1]
        )
    } else {
        format!(
            "the last attempts repeat with period {}, cycling through {}; fixing one violation \
             keeps reintroducing another",
            cycle.period,
            rendered.join(" then ")
        )
    }
}

/// The deterministic balancing instruction: a conjunction of every constraint
/// message, independent of any model.
pub fn fallback_instruction(constraints: &[Constraint]) -> String {
    let items: Vec<String> = constraints
        .iter()
        .enumerate()
        .map(|(i, c)| format!("({}) {}", i + 1, c.rendered_message()))
        .collect();
    truncate_chars(
        &format!(
            "Produce an output that satisfies ALL of the following simultaneously: {}",
            items.join("; ")
        ),
        MAX_META_INSTRUCTION_CHARS,
    )
}

fn truncate_chars(text: &str, max: usize) -> String {
    if text.chars().count() <= max {
        text.to_string()
    } else {
        text.chars().take(max).collect()
    }
}

/// Ask the meta model for a balancing instruction.
///
/// Exactly one model call is made. Any failure (backend error, empty text,
/// text over [`MAX_META_INSTRUCTION_CHARS`]) degrades to the fallback
/// instruction with the reason recorded; the engine's run never aborts on a
/// meta failure.
pub fn synthesize_instruction(
    backend: &dyn LmBackend,
    snapshot: &StateSnapshot,
    constraints: &[Constraint],
) -> MetaInstruction {
    let digest = snapshot.digest();
    let prompt = build_meta_prompt(snapshot);
    let fallback = |reason: String| MetaInstruction {
        text: fallback_instruction(constraints),
        source: MetaInstructionSource::Fallback,
        snapshot_digest: digest.clone(),
        fallback_reason: Some(reason),
    };
    match backend.complete(RoleTag::Meta, &prompt) {
        Err(err) => fallback(format!("meta model call failed: {err}")),
        Ok(completion) => {
            let text = completion.text.trim().to_string();
            if text.is_empty() {
                fallback("meta model returned empty text".into())
            } else if text.chars().count() > MAX_META_INSTRUCTION_CHARS {
                fallback(format!(
                    "meta model response exceeded {MAX_META_INSTRUCTION_CHARS} characters"
                ))
            } else {
                MetaInstruction {
                    text,
                    source: MetaInstructionSource::Synthesized,
                    snapshot_digest: digest,
                    fallback_reason: None,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptedBackend, ScriptedScript};
    use crate::pipeline::{FieldSpec, PredicateSpec};

    fn sig(ids: &[&str]) -> ViolationSignature {
        ViolationSignature::from_ids(ids.iter().copied())
    }

    #[test]
    fn signature_ignores_order_and_duplicates() {
        let a = Violation {
            constraint_id: "length".into(),
            rendered_message: String::new(),
            observed: String::new(),
        };
        let b = Violation {
            constraint_id: "keywords".into(),
            rendered_message: String::new(),
            observed: String::new(),
        };
        let left = ViolationSignature::from_violations(&[a.clone(), b.clone()]);
        let right = ViolationSignature::from_violations(&[b.clone(), a.clone(), b]);
        assert_eq!(left, right);
        assert_eq!(left.to_string(), "{keywords, length}");
    }

    #[test]
    fn alternating_pair_is_a_period_two_loop() {
        let history = vec![sig(&["length"]), sig(&["keywords"]), sig(&["length"])];
        let cycle = detect_loop(&history, 3).unwrap();
        assert_eq!(cycle.period, 2);
        assert_eq!(cycle.detected_at_attempt, 3);
        assert_eq!(cycle.signatures, vec![sig(&["keywords"]), sig(&["length"])]);
    }

    #[test]
    fn two_attempts_are_never_a_loop() {
        assert!(detect_loop(&[sig(&["a"]), sig(&["a"])], 3).is_none());
        assert!(detect_loop(&[sig(&["a"]), sig(&["b"])], 3).is_none());
        assert!(detect_loop(&[], 3).is_none());
    }

    #[test]
    fn stagnation_is_not_a_loop() {
        let history = vec![sig(&["a"]), sig(&["a"]), sig(&["a"]), sig(&["a"])];
        assert!(detect_loop(&history, 3).is_none());
    }

    #[test]
    fn three_distinct_signatures_close_a_period_three_loop() {
        let history = vec![sig(&["a"]), sig(&["b"]), sig(&["c"]), sig(&["a"])];
        let cycle = detect_loop(&history, 3).unwrap();
        assert_eq!(cycle.period, 3);
        assert_eq!(cycle.detected_at_attempt, 4);
        assert_eq!(cycle.signatures, vec![sig(&["b"]), sig(&["c"]), sig(&["a"])]);
    }

    #[test]
    fn max_period_bounds_the_search() {
        let history = vec![sig(&["a"]), sig(&["b"]), sig(&["c"]), sig(&["a"])];
        assert!(detect_loop(&history, 2).is_none());
    }

    #[test]
    fn smallest_period_wins_when_several_match() {
        let history =
            vec![sig(&["c"]), sig(&["a"]), sig(&["a"]), sig(&["b"]), sig(&["a"])];
        let cycle = detect_loop(&history, 3).unwrap();
        assert_eq!(cycle.period, 2);
        assert_eq!(cycle.signatures, vec![sig(&["b"]), sig(&["a"])]);
    }

    #[test]
    fn stagnating_tail_does_not_hide_behind_longer_period() {
        // latest equals both 2 and 3 back, but the period-2 window is all
        // identical and the period-3 equality fails
        let history = vec![sig(&["a"]), sig(&["b"]), sig(&["a"]), sig(&["a"]), sig(&["a"])];
        assert!(detect_loop(&history, 3).is_none());
    }

    #[test]
    fn multi_constraint_signatures_participate_in_loops() {
        let history = vec![sig(&["a", "b"]), sig(&["c"]), sig(&["b", "a"])];
        let cycle = detect_loop(&history, 3).unwrap();
        assert_eq!(cycle.period, 2);
    }

    fn tweet_constraints() -> Vec<Constraint> {
        vec![
            Constraint {
                id: "keywords".into(),
                kind: ConstraintKind::Soft,
                target_field: "tweet".into(),
                predicate: PredicateSpec::ContainsAll {
                    keywords: vec!["GAN".into(), "generator".into(), "discriminator".into()],
                    case_sensitive: true,
                },
                feedback_message: "Tweet must include these keywords: {keywords}".into(),
            },
            Constraint {
                id: "length".into(),
                kind: ConstraintKind::Soft,
                target_field: "tweet".into(),
                predicate: PredicateSpec::MaxChars { limit: 100 },
                feedback_message: "Tweet must be very concise (under {limit} characters).".into(),
            },
        ]
    }

    fn tweet_signature() -> Signature {
        Signature {
            name: "summarize".into(),
            instruction: "Summarize the text as a tweet.".into(),
            input_fields: vec![FieldSpec::new("source_text", "text to summarize")],
            output_fields: vec![FieldSpec::new("tweet", "the tweet")],
        }
    }

    fn snapshot() -> StateSnapshot {
        let violation = |id: &str, msg: &str, obs: &str| Violation {
            constraint_id: id.into(),
            rendered_message: msg.into(),
            observed: obs.into(),
        };
        let history = vec![
            AttemptSummary {
                index: 1,
                output_text: "a long tweet".into(),
                violations: vec![violation("length", "Too long.", "observed length 140")],
            },
            AttemptSummary {
                index: 2,
                output_text: "a short tweet".into(),
                violations: vec![violation("keywords", "Missing keywords.", "missing ['generator']")],
            },
            AttemptSummary {
                index: 3,
                output_text: "another long tweet".into(),
                violations: vec![violation("length", "Too long.", "observed length 131")],
            },
        ];
        let cycle = detect_loop(
            &history
                .iter()
                .map(|a| ViolationSignature::from_violations(&a.violations))
                .collect::<Vec<_>>(),
            3,
        )
        .unwrap();
        let mut inputs = FieldMap::new();
        inputs.insert("source_text".into(), "GANs were introduced in 2014.".into());
        aggregate_context(&tweet_signature(), &inputs, &tweet_constraints(), history, cycle)
    }

    #[test]
    fn aggregate_collects_signature_and_constraints() {
        let snap = snapshot();
        assert_eq!(snap.module, "summarize");
        assert_eq!(snap.input_fields, vec!["source_text".to_string()]);
        assert_eq!(snap.output_fields, vec!["tweet".to_string()]);
        assert_eq!(snap.constraints.len(), 2);
        assert_eq!(snap.constraints[0].id, "keywords");
        assert_eq!(snap.constraints[0].predicate,
            "contains_all(['GAN', 'generator', 'discriminator'])");
        assert_eq!(snap.history.len(), 3);
        assert_eq!(snap.cycle.period, 2);
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let a = snapshot();
        let b = snapshot();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        let mut c = snapshot();
        c.history[0].output_text.push('!');
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn meta_prompt_orders_constraints_history_pattern_request() {
        let messages = build_meta_prompt(&snapshot());
        assert_eq!(messages.len(), 2);
        let user = &messages[1].content;
        let constraints_at = user.find("Constraints:").unwrap();
        let history_at = user.find("Competition history:").unwrap();
        let pattern_at = user.find("Detected pattern:").unwrap();
        let request_at = user.find("Write one concise instruction").unwrap();
        assert!(constraints_at < history_at && history_at < pattern_at && pattern_at < request_at);
        assert!(user.contains("Attempt 1 violated {length}:"));
        assert!(user.contains("Attempt 2 violated {keywords}:"));
        assert!(user.contains("alternate with period 2 between {keywords} and {length}"));
        assert!(user.contains("[SOFT] length: max_chars(100)"));
    }

    #[test]
    fn fallback_is_a_conjunction_of_all_messages() {
        let text = fallback_instruction(&tweet_constraints());
        assert_eq!(
            text,
            "Produce an output that satisfies ALL of the following simultaneously: \
             (1) Tweet must include these keywords: ['GAN', 'generator', 'discriminator']; \
             (2) Tweet must be very concise (under 100 characters)."
        );
        assert!(text.chars().count() <= MAX_META_INSTRUCTION_CHARS);
    }

    #[test]
    fn synthesis_uses_the_meta_completion() {
        let backend = ScriptedBackend::new(ScriptedScript {
            meta: vec!["  Balance length and keywords.  ".into()],
            ..ScriptedScript::default()
        });
        let snap = snapshot();
        let instruction = synthesize_instruction(&backend, &snap, &tweet_constraints());
        assert_eq!(instruction.text, "Balance length and keywords.");
        assert_eq!(instruction.source, MetaInstructionSource::Synthesized);
        assert_eq!(instruction.snapshot_digest, snap.digest());
        assert!(instruction.fallback_reason.is_none());
        assert_eq!(backend.calls(RoleTag::Meta), 1);
        assert_eq!(backend.calls(RoleTag::Base), 0);
    }

    #[test]
    fn backend_failure_degrades_to_fallback() {
        let backend = ScriptedBackend::new(ScriptedScript::default());
        let instruction = synthesize_instruction(&backend, &snapshot(), &tweet_constraints());
        assert_eq!(instruction.source, MetaInstructionSource::Fallback);
        assert_eq!(instruction.text, fallback_instruction(&tweet_constraints()));
        assert!(instruction.fallback_reason.unwrap().contains("meta model call failed"));
    }

    #[test]
    fn empty_and_oversized_completions_degrade_to_fallback() {
        let backend = ScriptedBackend::new(ScriptedScript {
            meta: vec!["   ".into(), "x".repeat(MAX_META_INSTRUCTION_CHARS + 1)],
            ..ScriptedScript::default()
        });
        let empty = synthesize_instruction(&backend, &snapshot(), &tweet_constraints());
        assert_eq!(empty.source, MetaInstructionSource::Fallback);
        assert!(empty.fallback_reason.unwrap().contains("empty"));
        let oversized = synthesize_instruction(&backend, &snapshot(), &tweet_constraints());
        assert_eq!(oversized.source, MetaInstructionSource::Fallback);
        assert!(oversized.fallback_reason.unwrap().contains("exceeded"));
    }

    #[test]
    fn exactly_max_length_synthesis_is_kept() {
        let backend = ScriptedBackend::new(ScriptedScript {
            meta: vec!["y".repeat(MAX_META_INSTRUCTION_CHARS)],
            ..ScriptedScript::default()
        });
        let instruction = synthesize_instruction(&backend, &snapshot(), &tweet_constraints());
        assert_eq!(instruction.source, MetaInstructionSource::Synthesized);
        assert_eq!(instruction.text.chars().count(), MAX_META_INSTRUCTION_CHARS);
    }
}

//! Pipeline definitions: module signatures, constraints, and the predicate DSL.
//!
//! A pipeline is a list of modules, each described by a [`Signature`] and a set
//! of [`Constraint`]s over its output fields. Constraints are either `Hard`
//! (must hold for the run to succeed) or `Soft` (preferences; an output may be
//! accepted with soft violations once the retry budget is spent). Predicates
//! are a small closed DSL so definitions stay serializable and replayable.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Output (or input) values of a module, keyed by field name.
pub type FieldMap = BTreeMap<String, String>;

/// Reference to a pipeline-level input inside a dataflow entry, e.g. `$input.source_text`.
pub const INPUT_REF_PREFIX: &str = "$input.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub description: String,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self { name: name.into(), description: description.into() }
    }
}

/// Declarative description of one LM call: a base instruction plus named,
/// described input and output fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub name: String,
    pub instruction: String,
    pub input_fields: Vec<FieldSpec>,
    pub output_fields: Vec<FieldSpec>,
}

/// One check from the predicate DSL. All text matching is substring-based;
/// character limits count Unicode code points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PredicateSpec {
    /// Satisfied when the value is strictly shorter than `limit` code points.
    MaxChars { limit: usize },
    /// Satisfied when the value has at least `limit` code points.
    MinChars { limit: usize },
    ContainsAll { keywords: Vec<String>, case_sensitive: bool },
    ContainsAny { keywords: Vec<String>, case_sensitive: bool },
    NotContains { terms: Vec<String>, case_sensitive: bool },
    MatchesRegex { pattern: String },
    /// Satisfied when the whitespace-separated word count is in `lo..=hi`.
    WordCountBetween { lo: usize, hi: usize },
}

impl fmt::Display for PredicateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredicateSpec::MaxChars { limit } => write!(f, "max_chars({limit})"),
            PredicateSpec::MinChars { limit } => write!(f, "min_chars({limit})"),
            PredicateSpec::ContainsAll { keywords, case_sensitive } => {
                write!(f, "contains_all({}{})", python_list(keywords), case_suffix(*case_sensitive))
            }
            PredicateSpec::ContainsAny { keywords, case_sensitive } => {
                write!(f, "contains_any({}{})", python_list(keywords), case_suffix(*case_sensitive))
            }
            PredicateSpec::NotContains { terms, case_sensitive } => {
                write!(f, "not_contains({}{})", python_list(terms), case_suffix(*case_sensitive))
            }
            PredicateSpec::MatchesRegex { pattern } => write!(f, "matches_regex({pattern:?})"),
            PredicateSpec::WordCountBetween { lo, hi } => write!(f, "word_count_between({lo}, {hi})"),
        }
    }
}

fn case_suffix(case_sensitive: bool) -> &'static str {
    if case_sensitive {
        ""
    } else {
        ", case_insensitive"
    }
}

/// Format a list of strings the way the feedback templates expect:
/// `['GAN', 'generator', 'discriminator']`.
pub(crate) fn python_list(items: &[String]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| format!("'{s}'")).collect();
    format!("[{}]", quoted.join(", "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ConstraintKind {
    Hard,
    Soft,
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintKind::Hard => write!(f, "HARD"),
            ConstraintKind::Soft => write!(f, "SOFT"),
        }
    }
}

/// A named check over one output field, with a feedback template shown to the
/// model when the check fails. Templates may interpolate the predicate's
/// parameters: `{limit}`, `{keywords}`, `{terms}`, `{pattern}`, `{lo}`, `{hi}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub id: String,
    pub kind: ConstraintKind,
    pub target_field: String,
    pub predicate: PredicateSpec,
    pub feedback_message: String,
}

impl Constraint {
    /// The feedback template with predicate parameters interpolated.
    pub fn rendered_message(&self) -> String {
        interpolate(&self.feedback_message, &self.predicate)
    }
}

/// One failed constraint check against a concrete output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint_id: String,
    pub rendered_message: String,
    /// Short diagnostic: observed length, missing keywords, and so on.
    pub observed: String,
}

/// One module of a pipeline: its signature plus the ordered constraints over
/// its outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDef {
    pub signature: Signature,
    pub constraints: Vec<Constraint>,
}

/// A complete pipeline: ordered modules and the dataflow wiring each module's
/// input fields to pipeline inputs (`$input.<name>`) or earlier modules'
/// outputs (`<module>.<field>`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineDef {
    pub pipeline_id: String,
    pub modules: Vec<ModuleDef>,
    /// module name -> (input field -> source reference)
    pub dataflow: BTreeMap<String, BTreeMap<String, String>>,
}

impl PipelineDef {
    pub fn module(&self, name: &str) -> Option<&ModuleDef> {
        self.modules.iter().find(|m| m.signature.name == name)
    }
}

/// Evaluate a predicate against a single output value. Pure and total for
/// well-formed specs; an uncompilable regex (which `validate_pipeline`
/// rejects) evaluates to false.
pub fn evaluate_predicate(spec: &PredicateSpec, value: &str) -> bool {
    match spec {
        PredicateSpec::MaxChars { limit } => value.chars().count() < *limit,
        PredicateSpec::MinChars { limit } => value.chars().count() >= *limit,
        PredicateSpec::ContainsAll { keywords, case_sensitive } => {
            keywords.iter().all(|k| contains(value, k, *case_sensitive))
        }
        PredicateSpec::ContainsAny { keywords, case_sensitive } => {
            keywords.iter().any(|k| contains(value, k, *case_sensitive))
        }
        PredicateSpec::NotContains { terms, case_sensitive } => {
            !terms.iter().any(|t| contains(value, t, *case_sensitive))
        }
        PredicateSpec::MatchesRegex { pattern } => match regex::Regex::new(pattern) {
            Ok(re) => re.is_match(value),
            Err(_) => false,
        },
        PredicateSpec::WordCountBetween { lo, hi } => {
            let n = value.split_whitespace().count();
            *lo <= n && n <= *hi
        }
    }
}

fn contains(haystack: &str, needle: &str, case_sensitive: bool) -> bool {
    if case_sensitive {
        haystack.contains(needle)
    } else {
        haystack.to_lowercase().contains(&needle.to_lowercase())
    }
}

/// Raised by [`check_constraints`] when a constraint targets a field that is
/// absent from the output map. This is a structural error, not a violation:
/// `validate_pipeline` guarantees it cannot happen for validated pipelines.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("constraint '{constraint_id}' targets field '{field}' which is missing from the output")]
pub struct MissingTargetField {
    pub constraint_id: String,
    pub field: String,
}

/// Check every constraint, in declaration order, against an output map and
/// return all violations. An empty list means the output is fully compliant.
pub fn check_constraints(
    constraints: &[Constraint],
    output: &FieldMap,
) -> Result<Vec<Violation>, MissingTargetField> {
    let mut violations = Vec::new();
    for constraint in constraints {
        let value = output.get(&constraint.target_field).ok_or_else(|| MissingTargetField {
            constraint_id: constraint.id.clone(),
            field: constraint.target_field.clone(),
        })?;
        if !evaluate_predicate(&constraint.predicate, value) {
            violations.push(Violation {
                constraint_id: constraint.id.clone(),
                rendered_message: constraint.rendered_message(),
                observed: observed_diagnostic(&constraint.predicate, value),
            });
        }
    }
    Ok(violations)
}

/// Render a violation as the feedback line sent back to the model: the
/// interpolated template with the observed diagnostic appended.
pub fn render_feedback(violation: &Violation) -> String {
    if violation.observed.is_empty() {
        violation.rendered_message.clone()
    } else {
        format!("{} ({})", violation.rendered_message, violation.observed)
    }
}

/// Substitute predicate parameters into a feedback template. Placeholders
/// that the predicate does not define are left verbatim.
pub fn interpolate(template: &str, predicate: &PredicateSpec) -> String {
    let mut out = template.to_string();
    match predicate {
        PredicateSpec::MaxChars { limit } | PredicateSpec::MinChars { limit } => {
            out = out.replace("{limit}", &limit.to_string());
        }
        PredicateSpec::ContainsAll { keywords, .. } | PredicateSpec::ContainsAny { keywords, .. } => {
            out = out.replace("{keywords}", &python_list(keywords));
        }
        PredicateSpec::NotContains { terms, .. } => {
            out = out.replace("{terms}", &python_list(terms));
        }
        PredicateSpec::MatchesRegex { pattern } => {
            out = out.replace("{pattern}", pattern);
        }
        PredicateSpec::WordCountBetween { lo, hi } => {
            out = out.replace("{lo}", &lo.to_string()).replace("{hi}", &hi.to_string());
        }
    }
    out
}

fn observed_diagnostic(predicate: &PredicateSpec, value: &str) -> String {
    match predicate {
        PredicateSpec::MaxChars { .. } | PredicateSpec::MinChars { .. } => {
            format!("observed length {}", value.chars().count())
        }
        PredicateSpec::ContainsAll { keywords, case_sensitive } => {
            let missing: Vec<String> = keywords
                .iter()
                .filter(|k| !contains(value, k, *case_sensitive))
                .cloned()
                .collect();
            format!("missing {}", python_list(&missing))
        }
        PredicateSpec::ContainsAny { keywords, .. } => {
            format!("none of {} present", python_list(keywords))
        }
        PredicateSpec::NotContains { terms, case_sensitive } => {
            let found: Vec<String> = terms
                .iter()
                .filter(|t| contains(value, t, *case_sensitive))
                .cloned()
                .collect();
            format!("found {}", python_list(&found))
        }
        PredicateSpec::MatchesRegex { pattern } => format!("no match for /{pattern}/"),
        PredicateSpec::WordCountBetween { .. } => {
            format!("observed {} words", value.split_whitespace().count())
        }
    }
}

/// A structural problem found by [`validate_pipeline`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("pipeline_id must be non-empty")]
    EmptyPipelineId,
    #[error("pipeline has no modules")]
    NoModules,
    #[error("duplicate module name '{0}'")]
    DuplicateModuleName(String),
    #[error("module '{module}': signature name must be non-empty")]
    EmptySignatureName { module: String },
    #[error("module '{module}': field name must be non-empty")]
    EmptyFieldName { module: String },
    #[error("module '{module}': duplicate field name '{field}'")]
    DuplicateFieldName { module: String, field: String },
    #[error("module '{module}': at least one output field is required")]
    NoOutputFields { module: String },
    #[error("module '{module}': duplicate constraint id '{id}'")]
    DuplicateConstraintId { module: String, id: String },
    #[error("module '{module}', constraint '{id}': target field '{field}' is not an output field")]
    UnknownTargetField { module: String, id: String, field: String },
    #[error("module '{module}', constraint '{id}': feedback message is empty after interpolation")]
    EmptyFeedback { module: String, id: String },
    #[error("module '{module}', constraint '{id}': {problem}")]
    BadPredicate { module: String, id: String, problem: String },
    #[error("module '{module}': dataflow entry missing for input field '{field}'")]
    MissingDataflowEntry { module: String, field: String },
    #[error("module '{module}': dataflow maps unknown input field '{field}'")]
    UnknownDataflowField { module: String, field: String },
    #[error("module '{module}', input '{field}': dataflow reference '{reference}' does not resolve")]
    DanglingDataflowRef { module: String, field: String, reference: String },
    #[error(
        "module '{module}', input '{field}': reference '{reference}' points at module '{target}' \
         which does not run earlier in the pipeline"
    )]
    ForwardDataflowRef { module: String, field: String, reference: String, target: String },
}

fn validate_predicate(spec: &PredicateSpec) -> Option<String> {
    match spec {
        PredicateSpec::MaxChars { limit } | PredicateSpec::MinChars { limit } => {
            (*limit == 0).then(|| "character limit must be positive".to_string())
        }
        PredicateSpec::ContainsAll { keywords, .. } | PredicateSpec::ContainsAny { keywords, .. } => {
            keywords.is_empty().then(|| "keyword list must be non-empty".to_string())
        }
        PredicateSpec::NotContains { terms, .. } => {
            terms.is_empty().then(|| "term list must be non-empty".to_string())
        }
        PredicateSpec::MatchesRegex { pattern } => {
            regex::Regex::new(pattern).err().map(|e| format!("regex does not compile: {e}"))
        }
        PredicateSpec::WordCountBetween { lo, hi } => {
            if *hi == 0 {
                Some("word count upper bound must be positive".to_string())
            } else if lo > hi {
                Some(format!("word count range is inverted ({lo} > {hi})"))
            } else {
                None
            }
        }
    }
}

/// Check every structural invariant of a pipeline definition and return the
/// full list of problems. An empty list means the pipeline is valid.
pub fn validate_pipeline(def: &PipelineDef) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    if def.pipeline_id.trim().is_empty() {
        errors.push(ValidationError::EmptyPipelineId);
    }
    if def.modules.is_empty() {
        errors.push(ValidationError::NoModules);
    }

    let mut seen_modules: Vec<&str> = Vec::new();
    for module_def in &def.modules {
        let sig = &module_def.signature;
        let module = sig.name.clone();
        if module.trim().is_empty() {
            errors.push(ValidationError::EmptySignatureName { module: module.clone() });
        }
        if seen_modules.contains(&sig.name.as_str()) {
            errors.push(ValidationError::DuplicateModuleName(module.clone()));
        }
        seen_modules.push(sig.name.as_str());

        let mut seen_fields: Vec<&str> = Vec::new();
        for field in sig.input_fields.iter().chain(sig.output_fields.iter()) {
            if field.name.trim().is_empty() {
                errors.push(ValidationError::EmptyFieldName { module: module.clone() });
            }
            if seen_fields.contains(&field.name.as_str()) {
                errors.push(ValidationError::DuplicateFieldName {
                    module: module.clone(),
                    field: field.name.clone(),
                });
            }
            seen_fields.push(field.name.as_str());
        }
        if sig.output_fields.is_empty() {
            errors.push(ValidationError::NoOutputFields { module: module.clone() });
        }

        let mut seen_ids: Vec<&str> = Vec::new();
        for constraint in &module_def.constraints {
            if seen_ids.contains(&constraint.id.as_str()) {
                errors.push(ValidationError::DuplicateConstraintId {
                    module: module.clone(),
                    id: constraint.id.clone(),
                });
            }
            seen_ids.push(constraint.id.as_str());

            if !sig.output_fields.iter().any(|f| f.name == constraint.target_field) {
                errors.push(ValidationError::UnknownTargetField {
                    module: module.clone(),
                    id: constraint.id.clone(),
                    field: constraint.target_field.clone(),
                });
            }
            if let Some(problem) = validate_predicate(&constraint.predicate) {
                errors.push(ValidationError::BadPredicate {
                    module: module.clone(),
                    id: constraint.id.clone(),
                    problem,
                });
            }
            if constraint.rendered_message().trim().is_empty() {
                errors.push(ValidationError::EmptyFeedback {
                    module: module.clone(),
                    id: constraint.id.clone(),
                });
            }
        }
    }

    validate_dataflow(def, &mut errors);
    errors
}

/// Dataflow references must resolve to pipeline inputs or to output fields of
/// modules that run earlier; the earlier-only rule makes the graph acyclic by
/// construction.
fn validate_dataflow(def: &PipelineDef, errors: &mut Vec<ValidationError>) {
    for (index, module_def) in def.modules.iter().enumerate() {
        let module = module_def.signature.name.clone();
        let wiring = def.dataflow.get(&module);
        for input in &module_def.signature.input_fields {
            let Some(reference) = wiring.and_then(|w| w.get(&input.name)) else {
                errors.push(ValidationError::MissingDataflowEntry {
                    module: module.clone(),
                    field: input.name.clone(),
                });
                continue;
            };
            if reference.starts_with(INPUT_REF_PREFIX) {
                continue; // pipeline inputs are supplied at run time
            }
            let Some((target, field)) = reference.split_once('.') else {
                errors.push(ValidationError::DanglingDataflowRef {
                    module: module.clone(),
                    field: input.name.clone(),
                    reference: reference.clone(),
                });
                continue;
            };
            let earlier = def.modules[..index].iter().find(|m| m.signature.name == target);
            match earlier {
                None => {
                    if def.modules[index..].iter().any(|m| m.signature.name == target) {
                        errors.push(ValidationError::ForwardDataflowRef {
                            module: module.clone(),
                            field: input.name.clone(),
                            reference: reference.clone(),
                            target: target.to_string(),
                        });
                    } else {
                        errors.push(ValidationError::DanglingDataflowRef {
                            module: module.clone(),
                            field: input.name.clone(),
                            reference: reference.clone(),
                        });
                    }
                }
                Some(producer) => {
                    if !producer.signature.output_fields.iter().any(|f| f.name == field) {
                        errors.push(ValidationError::DanglingDataflowRef {
                            module: module.clone(),
                            field: input.name.clone(),
                            reference: reference.clone(),
                        });
                    }
                }
            }
        }
        if let Some(wiring) = wiring {
            for field in wiring.keys() {
                if !module_def.signature.input_fields.iter().any(|f| f.name == *field) {
                    errors.push(ValidationError::UnknownDataflowField {
                        module: module.clone(),
                        field: field.clone(),
                    });
                }
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PipelineFile {
    format: String,
    format_version: u32,
    #[serde(flatten)]
    def: PipelineDef,
}

/// Load a pipeline definition. Structural validity is the caller's concern:
/// run [`validate_pipeline`] on the result before executing it.
pub fn load_pipeline(path: &std::path::Path) -> Result<PipelineDef, crate::files::FileError> {
    let file: PipelineFile = crate::files::read_versioned(path, "pipeline")?;
    Ok(file.def)
}

pub fn save_pipeline(
    path: &std::path::Path,
    def: &PipelineDef,
) -> Result<(), crate::files::FileError> {
    let file = PipelineFile {
        format: "pipeline".into(),
        format_version: crate::files::FORMAT_VERSION,
        def: def.clone(),
    };
    crate::files::write_versioned(path, &file)
}

#[derive(Debug, Serialize, Deserialize)]
struct InputsFile {
    format: String,
    format_version: u32,
    inputs: FieldMap,
}

/// Load one record of pipeline inputs.
pub fn load_inputs(path: &std::path::Path) -> Result<FieldMap, crate::files::FileError> {
    let file: InputsFile = crate::files::read_versioned(path, "inputs")?;
    Ok(file.inputs)
}

pub fn save_inputs(
    path: &std::path::Path,
    inputs: &FieldMap,
) -> Result<(), crate::files::FileError> {
    let file = InputsFile {
        format: "inputs".into(),
        format_version: crate::files::FORMAT_VERSION,
        inputs: inputs.clone(),
    };
    crate::files::write_versioned(path, &file)
}

/// Resolve one module's concrete inputs from the pipeline inputs and the
/// outputs of modules that already ran.
pub fn resolve_module_inputs(
    def: &PipelineDef,
    module: &str,
    pipeline_inputs: &FieldMap,
    prior_outputs: &BTreeMap<String, FieldMap>,
) -> Result<FieldMap, String> {
    let module_def = def
        .module(module)
        .ok_or_else(|| format!("unknown module '{module}'"))?;
    let wiring = def
        .dataflow
        .get(module)
        .ok_or_else(|| format!("no dataflow entry for module '{module}'"))?;
    let mut inputs = FieldMap::new();
    for input in &module_def.signature.input_fields {
        let reference = wiring
            .get(&input.name)
            .ok_or_else(|| format!("no dataflow source for input '{}'", input.name))?;
        let value = if let Some(name) = reference.strip_prefix(INPUT_REF_PREFIX) {
            pipeline_inputs
                .get(name)
                .ok_or_else(|| format!("pipeline input '{name}' was not provided"))?
        } else {
            let (target, field) = reference
                .split_once('.')
                .ok_or_else(|| format!("malformed dataflow reference '{reference}'"))?;
            prior_outputs
                .get(target)
                .and_then(|outputs| outputs.get(field))
                .ok_or_else(|| format!("dataflow reference '{reference}' has no produced value"))?
        };
        inputs.insert(input.name.clone(), value.clone());
    }
    Ok(inputs)
}

//! Deterministic backend that replays pre-written completions.
//!
//! Each role has its own FIFO queue; a call pops the next entry for its role
//! or fails with `ScriptExhausted`. Received prompts are recorded so tests
//! can assert exactly what the model was shown.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Completion, LmBackend, RoleTag};
use crate::files::{self, FileError, FORMAT_VERSION};
use crate::prompt::PromptMessages;

pub const SCRIPTED_MODEL_NAME: &str = "scripted";

/// Pre-written completions, one queue per role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedScript {
    #[serde(default)]
    pub base: Vec<String>,
    #[serde(default)]
    pub meta: Vec<String>,
    #[serde(default)]
    pub teacher: Vec<String>,
}

impl ScriptedScript {
    pub fn base_only(entries: Vec<String>) -> Self {
        Self { base: entries, ..Self::default() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptFile {
    format: String,
    format_version: u32,
    #[serde(flatten)]
    script: ScriptedScript,
}

pub fn load_script(path: &Path) -> Result<ScriptedScript, FileError> {
    let file: ScriptFile = files::read_versioned(path, "script")?;
    Ok(file.script)
}

pub fn save_script(path: &Path, script: &ScriptedScript) -> Result<(), FileError> {
    let file = ScriptFile {
        format: "script".into(),
        format_version: FORMAT_VERSION,
        script: script.clone(),
    };
    files::write_versioned(path, &file)
}

#[derive(Debug, Default)]
struct RoleState {
    queue: VecDeque<String>,
    consumed: usize,
    prompts: Vec<PromptMessages>,
}

pub struct ScriptedBackend {
    state: Mutex<[RoleState; 3]>,
}

fn slot(role: RoleTag) -> usize {
    match role {
        RoleTag::Base => 0,
        RoleTag::Meta => 1,
        RoleTag::Teacher => 2,
    }
}

impl ScriptedBackend {
    pub fn new(script: ScriptedScript) -> Self {
        let make = |entries: Vec<String>| RoleState {
            queue: entries.into(),
            consumed: 0,
            prompts: Vec::new(),
        };
        Self { state: Mutex::new([make(script.base), make(script.meta), make(script.teacher)]) }
    }

    pub fn from_file(path: &Path) -> Result<Self, FileError> {
        Ok(Self::new(load_script(path)?))
    }

    /// Completions consumed so far for `role`.
    pub fn calls(&self, role: RoleTag) -> usize {
        self.state.lock().unwrap()[slot(role)].consumed
    }

    /// Completions still queued for `role`.
    pub fn remaining(&self, role: RoleTag) -> usize {
        self.state.lock().unwrap()[slot(role)].queue.len()
    }

    /// Every prompt received for `role`, in call order.
    pub fn prompts(&self, role: RoleTag) -> Vec<PromptMessages> {
        self.state.lock().unwrap()[slot(role)].prompts.clone()
    }
}

impl LmBackend for ScriptedBackend {
    fn complete(&self, role: RoleTag, prompt: &PromptMessages) -> Result<Completion, BackendError> {
        let mut state = self.state.lock().unwrap();
        let entry = &mut state[slot(role)];
        entry.prompts.push(prompt.clone());
        match entry.queue.pop_front() {
            Some(text) => {
                entry.consumed += 1;
                Ok(Completion { text, model: SCRIPTED_MODEL_NAME.into(), usage: None })
            }
            None => Err(BackendError::ScriptExhausted { role, consumed: entry.consumed }),
        }
    }

    fn model_name(&self, _role: RoleTag) -> String {
        SCRIPTED_MODEL_NAME.into()
    }
}

//! Model backends.
//!
//! The engine talks to language models through [`LmBackend`], addressing each
//! call by a [`RoleTag`]: `Base` for the model under refinement, `Meta` for
//! the model that synthesizes balancing instructions, `Teacher` for the model
//! used while bootstrapping demonstrations. A backend may serve all three
//! roles from one model or route them differently; callers never know.

pub mod http;
pub mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptMessages;

pub use http::{BackendConfig, HttpBackend};
pub use scripted::{ScriptedBackend, ScriptedScript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleTag {
    Base,
    Meta,
    Teacher,
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoleTag::Base => write!(f, "base"),
            RoleTag::Meta => write!(f, "meta"),
            RoleTag::Teacher => write!(f, "teacher"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One model response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Model that produced the text, as reported by the backend.
    pub model: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// A scripted backend ran out of queued completions for the role.
    #[error("scripted backend has no more '{role}' completions (consumed {consumed})")]
    ScriptExhausted { role: RoleTag, consumed: usize },
    #[error("transport failure talking to the model endpoint: {0}")]
    Transport(String),
    #[error("model endpoint rejected the request with status {status}: {body_excerpt}")]
    RemoteRejection { status: u16, body_excerpt: String },
    #[error("model endpoint returned an unusable response: {0}")]
    MalformedResponse(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

/// A synchronous chat-completion backend.
pub trait LmBackend: Send + Sync {
    fn complete(&self, role: RoleTag, prompt: &PromptMessages) -> Result<Completion, BackendError>;
    /// Name of the model that would serve `role`, for provenance records.
    fn model_name(&self, role: RoleTag) -> String;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_tags_serialize_lowercase() {
        assert_eq!(serde_json::to_string(&RoleTag::Base).unwrap(), "\"base\"");
        assert_eq!(serde_json::to_string(&RoleTag::Teacher).unwrap(), "\"teacher\"");
        assert_eq!(RoleTag::Meta.to_string(), "meta");
    }

    #[test]
    fn errors_render_their_context() {
        let err = BackendError::ScriptExhausted { role: RoleTag::Base, consumed: 4 };
        let text = err.to_string();
        assert!(text.contains("base"));
        assert!(text.contains("4"));
        let err = BackendError::RemoteRejection { status: 429, body_excerpt: "slow down".into() };
        assert!(err.to_string().contains("429"));
    }
}

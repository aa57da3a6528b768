//! OpenAI-compatible chat-completions backend over HTTP.
//!
//! Credentials are never part of the configuration: `api_key_env` names an
//! environment variable and the key is read from the process environment at
//! construction time. Transient failures (transport errors, 429, 5xx) are
//! retried with linear backoff before giving up.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Completion, LmBackend, RoleTag, Usage};
use crate::prompt::PromptMessages;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    /// Model serving `Base` calls, and the default for the other roles.
    pub model: String,
    pub meta_model: Option<String>,
    pub teacher_model: Option<String>,
    /// Name of the environment variable holding the API key. `None` sends no
    /// Authorization header (for local or unauthenticated endpoints).
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Extra attempts after the first, on transport errors, 429, and 5xx.
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub extra_headers: BTreeMap<String, String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            meta_model: None,
            teacher_model: None,
            api_key_env: None,
            timeout_secs: 60,
            max_retries: 2,
            retry_backoff_ms: 250,
            extra_headers: BTreeMap::new(),
        }
    }
}

pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

// manual impl so the API key can never leak through debug formatting
impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish_non_exhaustive()
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a PromptMessages,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    model: Option<String>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        if config.endpoint.trim().is_empty() {
            return Err(BackendError::Config("endpoint must be set".into()));
        }
        if config.model.trim().is_empty() {
            return Err(BackendError::Config("model must be set".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable '{var}' is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(format!("failed to build HTTP client: {e}")))?;
        Ok(Self { config, api_key, client })
    }

    fn resolved_model(&self, role: RoleTag) -> &str {
        match role {
            RoleTag::Base => &self.config.model,
            RoleTag::Meta => self.config.meta_model.as_deref().unwrap_or(&self.config.model),
            RoleTag::Teacher => self.config.teacher_model.as_deref().unwrap_or(&self.config.model),
        }
    }

    fn send_once(
        &self,
        model: &str,
        prompt: &PromptMessages,
    ) -> Result<(u16, String), BackendError> {
        let mut request = self
            .client
            .post(&self.config.endpoint)
            .json(&ChatRequest { model, messages: prompt });
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        for (name, value) in &self.config.extra_headers {
            request = request.header(name, value);
        }
        let response = request.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok((status, body))
    }

    fn retryable(result: &Result<(u16, String), BackendError>) -> bool {
        match result {
            Err(BackendError::Transport(_)) => true,
            Ok((status, _)) => *status == 429 || (500..600).contains(status),
            Err(_) => false,
        }
    }
}

impl LmBackend for HttpBackend {
    fn complete(&self, role: RoleTag, prompt: &PromptMessages) -> Result<Completion, BackendError> {
        let model = self.resolved_model(role);
        let mut result = self.send_once(model, prompt);
        for attempt in 0..self.config.max_retries {
            if !Self::retryable(&result) {
                break;
            }
            let backoff = self.config.retry_backoff_ms * u64::from(attempt + 1);
            if backoff > 0 {
                std::thread::sleep(Duration::from_millis(backoff));
            }
            result = self.send_once(model, prompt);
        }
        let (status, body) = result?;
        if !(200..300).contains(&status) {
            let mut excerpt: String = body.chars().take(200).collect();
            if excerpt.len() < body.len() {
                excerpt.push_str("...");
            }
            return Err(BackendError::RemoteRejection { status, body_excerpt: excerpt });
        }
        let parsed: ChatResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::MalformedResponse(format!("bad JSON body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("response has no choices".into()))?;
        Ok(Completion {
            text: choice.message.content,
            model: parsed.model.unwrap_or_else(|| model.to_string()),
            usage: parsed.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens.unwrap_or(0),
                completion_tokens: u.completion_tokens.unwrap_or(0),
            }),
        })
    }

    fn model_name(&self, role: RoleTag) -> String {
        self.resolved_model(role).to_string()
    }
}

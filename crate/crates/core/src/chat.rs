//! Blocking client for JSON-over-HTTP chat-completion endpoints
//! (`POST {base}/chat/completions`, reply text at `choices[0].message.content`).
//! Shared by the remote agent, the remote teacher and the remote grader.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Default environment variable holding the bearer token.
pub const DEFAULT_TOKEN_ENV: &str = "TOOLFAULT_API_KEY";

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("endpoint not configured: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response shape: {0}")]
    Response(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Transport-level retries only.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_token_env() -> String {
    DEFAULT_TOKEN_ENV.to_string()
}

fn default_timeout() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

impl EndpointConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        EndpointConfig {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            token_env: default_token_env(),
            timeout_ms: default_timeout(),
            max_retries: default_retries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage { role: role.to_string(), content: content.into() }
    }
}

#[derive(Debug, Clone)]
pub struct ChatClient {
    config: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl ChatClient {
    /// Reads the token from the configured environment variable if set.
    pub fn new(config: EndpointConfig) -> Self {
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        Self::with_token(config, token)
    }

    pub fn with_token(config: EndpointConfig, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        ChatClient { config, token, agent }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn complete(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        let url = format!("{}/chat/completions", self.config.base_url);
        let body = json!({ "model": self.config.model, "messages": messages, "temperature": 0 });
        let mut last = String::new();
        for _ in 0..=self.config.max_retries {
            let mut request = self.agent.post(&url).header("Content-Type", "application/json");
            if let Some(token) = &self.token {
                request = request.header("Authorization", &format!("Bearer {token}"));
            }
            match request.send_json(&body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    let value: Value =
                        response.body_mut().read_json().map_err(|e| ChatError::Response(e.to_string()))?;
                    if status >= 400 {
                        return Err(ChatError::Response(format!("status {status}: {value}")));
                    }
                    return value
                        .pointer("/choices/0/message/content")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .ok_or_else(|| ChatError::Response("missing choices[0].message.content".into()));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(ChatError::Transport(last))
    }
}

//! OpenAI-compatible HTTP upstream (`/chat/completions`, `/embeddings`).

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{BackendTag, ChatRequest, Completion, GatewayError, Upstream, Usage};

#[derive(Debug, Clone)]
pub struct OpenAiCompatible {
    base_url: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl OpenAiCompatible {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(OpenAiCompatible {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            client,
        })
    }

    /// Reads the API key from the environment variable `key_var`.
    pub fn from_env(base_url: impl Into<String>, key_var: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let key = std::env::var(key_var)
            .map_err(|_| GatewayError::InvalidRequest(format!("environment variable {key_var} is not set")))?;
        Self::new(base_url, key, timeout)
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<serde_json::Value, GatewayError> {
        let response = self
            .client
            .post(format!("{}{path}", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(GatewayError::RateLimited(text));
        }
        if status.is_server_error() {
            return Err(GatewayError::Transport(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(GatewayError::Api {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))
    }
}

#[derive(Deserialize)]
struct ChatBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl Upstream for OpenAiCompatible {
    fn tag(&self) -> BackendTag {
        BackendTag::Live
    }

    fn chat(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_text}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        let body = self.post(
            "/chat/completions",
            json!({
                "model": request.model_name,
                "messages": messages,
                "temperature": request.temperature,
                "max_tokens": request.max_output_tokens,
            }),
        )?;
        let body: ChatBody = serde_json::from_value(body).map_err(|e| GatewayError::Decode(e.to_string()))?;
        let text = body
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Decode("response has no message content".into()))?;
        let usage = body.usage.map_or(Usage::default(), |u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        });
        Ok(Completion { text, usage })
    }

    fn embed(&self, model_name: &str, text: &str) -> Result<Vec<f64>, GatewayError> {
        let body = self.post("/embeddings", json!({"model": model_name, "input": text}))?;
        let body: EmbeddingBody = serde_json::from_value(body).map_err(|e| GatewayError::Decode(e.to_string()))?;
        body.data
            .into_iter()
            .next()
            .map(|item| item.embedding)
            .ok_or_else(|| GatewayError::Decode("response has no embedding".into()))
    }
}

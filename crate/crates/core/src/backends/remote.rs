use std::sync::atomic::{AtomicU8, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, GenerationParams, InFlightLimit};

const TOP_K_UNKNOWN: u8 = 0;
const TOP_K_ACCEPTED: u8 = 1;
const TOP_K_REJECTED: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL up to and including the API version, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token. Unset variable means no auth header.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub system_prompt: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: String::new(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 120,
            max_in_flight: 8,
            system_prompt: None,
        }
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
///
/// `top_k` is not part of the core schema; it is sent until the server
/// rejects a request carrying it, then dropped for the client's lifetime.
pub struct RemoteBackend {
    config: RemoteConfig,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    top_k_state: AtomicU8,
    in_flight: InFlightLimit,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: RemoteConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        if config.model.is_empty() {
            return Err(BackendError::InvalidRequest("remote backend needs a model name".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(RemoteBackend {
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            in_flight: InFlightLimit::new(config.max_in_flight),
            config,
            api_key,
            client,
            top_k_state: AtomicU8::new(TOP_K_UNKNOWN),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub(crate) fn request_body(&self, prompt: &str, image_ref: Option<&str>, params: &GenerationParams, with_top_k: bool) -> Value {
        let content = match image_ref {
            Some(url) => json!([
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": url}},
            ]),
            None => Value::String(prompt.to_string()),
        };
        let mut messages = Vec::new();
        if let Some(sys) = &self.config.system_prompt {
            messages.push(json!({"role": "system", "content": sys}));
        }
        messages.push(json!({"role": "user", "content": content}));
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_new_tokens,
        });
        if with_top_k {
            body["top_k"] = json!(params.top_k);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<String, BackendError> {
        let _slot = self.in_flight.acquire();
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, text));
        }
        extract_content(&text)
    }
}

fn classify_status(code: u16, body: String) -> BackendError {
    match code {
        400 | 413 | 422 => BackendError::Rejection {
            message: serde_json::from_str::<Value>(&body)
                .ok()
                .and_then(|v| {
                    v.pointer("/error/message")
                        .or_else(|| v.get("detail"))
                        .or_else(|| v.get("message"))
                        .and_then(Value::as_str)
                        .map(str::to_string)
                })
                .unwrap_or(body),
        },
        _ => BackendError::HttpStatus { code, body },
    }
}

fn extract_content(text: &str) -> Result<String, BackendError> {
    let v: Value = serde_json::from_str(text).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        Value::Null => Ok(String::new()),
        other => Err(BackendError::MalformedResponse(format!("unexpected content {other}"))),
    }
}

impl Backend for RemoteBackend {
    fn generate(&self, prompt: &str, image_ref: Option<&str>, params: &GenerationParams) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        let state = self.top_k_state.load(Ordering::SeqCst);
        if state == TOP_K_REJECTED {
            return self.post(&self.request_body(prompt, image_ref, params, false));
        }
        match self.post(&self.request_body(prompt, image_ref, params, true)) {
            Ok(text) => {
                self.top_k_state.store(TOP_K_ACCEPTED, Ordering::SeqCst);
                Ok(text)
            }
            Err(BackendError::Rejection { message }) if state == TOP_K_UNKNOWN => {
                log::info!("server rejected a request with top_k ({message}); omitting top_k from now on");
                self.top_k_state.store(TOP_K_REJECTED, Ordering::SeqCst);
                self.post(&self.request_body(prompt, image_ref, params, false))
            }
            Err(e) => Err(e),
        }
    }

    fn describe(&self) -> String {
        format!("remote({} @ {})", self.config.model, self.config.base_url)
    }
}

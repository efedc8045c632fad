use std::fmt;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, LlmError, LlmRequest};

const SYSTEM_PROMPT: &str = "You are an expert GPU performance engineer. \
Answer with complete code inside fenced code blocks.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    /// Full URL of the chat completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub request_timeout_s: u64,
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    1_000
}

fn default_timeout_s() -> u64 {
    600
}

/// OpenAI-compatible chat backend.
pub struct HttpBackend {
    settings: HttpSettings,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.settings.endpoint)
            .field("model", &self.settings.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Done(String),
    Transient(String),
    Fatal(LlmError),
}

impl HttpBackend {
    /// `api_key` is passed in already resolved; it is only ever placed in the
    /// Authorization header.
    pub fn new(settings: HttpSettings, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.request_timeout_s))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpBackend {
            settings,
            api_key,
            client,
        })
    }

    /// Resolves the key from the configured environment variable.
    pub fn from_env(settings: HttpSettings) -> Result<Self, LlmError> {
        let api_key =
            match &settings.api_key_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    LlmError::Config(format!("environment variable {var} is not set"))
                })?),
                None => None,
            };
        HttpBackend::new(settings, api_key)
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.client.post(&self.settings.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            // The error text never contains the Authorization header.
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Transient(format!("HTTP {status}"));
        }
        if !status.is_success() {
            return Attempt::Fatal(LlmError::BackendRejected {
                status: status.as_u16(),
                body: truncate(&text, 2_000),
            });
        }
        match extract_content(&text) {
            Some(content) => Attempt::Done(content),
            None => Attempt::Fatal(LlmError::BackendRejected {
                status: status.as_u16(),
                body: format!("unrecognized response shape: {}", truncate(&text, 2_000)),
            }),
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

/// Accepts both `choices[0].message.content` and `content[0].text` shapes.
fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    if let Some(s) = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
    {
        return Some(s.to_string());
    }
    let parts = v.get("content")?.as_array()?;
    let text: String = parts
        .iter()
        .filter_map(|p| p.get("text").and_then(Value::as_str))
        .collect();
    (!text.is_empty()).then_some(text)
}

impl Backend for HttpBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let body = json!({
            "model": self.settings.model,
            "temperature": request.temperature_hint,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": request.prompt},
            ],
        });
        let attempts = self.settings.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self
                    .settings
                    .backoff_base_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                debug!("retrying {} in {wait} ms", request.stage);
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Attempt::Done(content) => return Ok(content),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(e) => {
                    warn!(
                        "{} request attempt {} failed: {e}",
                        request.stage,
                        attempt + 1
                    );
                    last_error = e;
                }
            }
        }
        Err(LlmError::BackendUnavailable {
            attempts,
            last_error,
        })
    }

    fn name(&self) -> &str {
        "http"
    }
}

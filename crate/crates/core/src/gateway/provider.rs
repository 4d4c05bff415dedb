//! Generative back ends: a JSON-over-HTTP chat client, a canned fixture
//! provider and an echo provider.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{self, HttpError};
use crate::model::FoodClass;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("request timed out: {0}")]
    Timeout(String),
    /// 5xx status or a dropped connection.
    #[error("server error: {0}")]
    Server(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("API key environment variable {0} is not set")]
    AuthMissing(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Timeout(_) | ProviderError::Server(_))
    }
}

impl From<HttpError> for ProviderError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Timeout(m) => ProviderError::Timeout(m),
            HttpError::Status { status, body } if status >= 500 => {
                ProviderError::Server(format!("HTTP {status}: {body}"))
            }
            HttpError::Status { status, body } => ProviderError::Rejected(format!("HTTP {status}: {body}")),
            HttpError::Transport(m) => ProviderError::Server(m),
            HttpError::BadJson(m) => ProviderError::BadResponse(m),
        }
    }
}

pub trait GenerativeProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model(&self) -> &str;
    /// Returns the raw response text for `prompt`.
    fn complete(&self, prompt: &str, class: &FoodClass) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Http,
    Canned,
    Echo,
}

/// Request/response dialect of an HTTP provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// `POST endpoint` with `{model, messages}`; reads `choices[0].message.content`.
    #[default]
    ChatCompletions,
    /// `POST {endpoint}/models/{model}:generateContent`; reads `candidates[0].content.parts[*].text`.
    GenerateContent,
}

fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_id: String,
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the key, never the key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub api_style: ApiStyle,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Directory of `<class_id>.txt` responses for the canned provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ProviderConfigError {
    #[error("reading provider config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid provider config: {0}")]
    Invalid(String),
}

pub(crate) fn is_safe_name(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('.')
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl ProviderConfig {
    /// Reads a JSON config; a relative `fixtures` path resolves against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, ProviderConfigError> {
        let read_err = |message: String| ProviderConfigError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let mut cfg: ProviderConfig = serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?;
        if let (Some(f), Some(base)) = (&cfg.fixtures, path.parent()) {
            if f.is_relative() {
                cfg.fixtures = Some(base.join(f));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ProviderConfigError> {
        let invalid = |m: &str| Err(ProviderConfigError::Invalid(m.to_owned()));
        if !is_safe_name(&self.provider_id) {
            return invalid("provider_id must be a filesystem-safe name ([A-Za-z0-9._-], not starting with '.')");
        }
        if self.max_in_flight < 1 {
            return invalid("max_in_flight must be >= 1");
        }
        match self.kind {
            ProviderKind::Http => {
                let Some(endpoint) = &self.endpoint else {
                    return invalid("http provider requires an endpoint");
                };
                if url::Url::parse(endpoint).is_err() {
                    return invalid("endpoint is not a URL");
                }
            }
            ProviderKind::Canned => {
                if self.fixtures.as_ref().is_none_or(|f| !f.is_dir()) {
                    return invalid("canned provider requires an existing fixtures directory");
                }
            }
            ProviderKind::Echo => {}
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn GenerativeProvider>, ProviderConfigError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::Http => Box::new(HttpChatProvider::new(self.clone())),
            ProviderKind::Canned => Box::new(CannedProvider::new(
                &self.provider_id,
                &self.model,
                self.fixtures.clone().unwrap_or_default(),
            )),
            ProviderKind::Echo => Box::new(EchoProvider::new(&self.provider_id)),
        })
    }
}

pub struct HttpChatProvider {
    cfg: ProviderConfig,
    agent: ureq::Agent,
}

impl HttpChatProvider {
    pub fn new(cfg: ProviderConfig) -> Self {
        let agent = http::agent(Duration::from_millis(cfg.timeout_ms));
        Self { cfg, agent }
    }

    fn api_key(&self) -> Result<Option<String>, ProviderError> {
        match &self.cfg.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Ok(Some(v)),
                _ => Err(ProviderError::AuthMissing(var.clone())),
            },
        }
    }
}

impl GenerativeProvider for HttpChatProvider {
    fn provider_id(&self) -> &str {
        &self.cfg.provider_id
    }

    fn model(&self) -> &str {
        &self.cfg.model
    }

    fn complete(&self, prompt: &str, _class: &FoodClass) -> Result<String, ProviderError> {
        let key = self.api_key()?;
        let endpoint = self.cfg.endpoint.as_deref().unwrap_or_default();
        let mut headers = Vec::new();
        match self.cfg.api_style {
            ApiStyle::ChatCompletions => {
                if let Some(k) = key {
                    headers.push(("Authorization", format!("Bearer {k}")));
                }
                let body = json!({
                    "model": self.cfg.model,
                    "messages": [{"role": "user", "content": prompt}],
                });
                let resp = http::post_json(&self.agent, endpoint, &headers, &body)?;
                resp.pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_owned)
                    .ok_or_else(|| ProviderError::BadResponse("missing choices[0].message.content".into()))
            }
            ApiStyle::GenerateContent => {
                if let Some(k) = key {
                    headers.push(("x-goog-api-key", k));
                }
                let url = format!(
                    "{}/models/{}:generateContent",
                    endpoint.trim_end_matches('/'),
                    self.cfg.model
                );
                let body = json!({"contents": [{"parts": [{"text": prompt}]}]});
                let resp = http::post_json(&self.agent, &url, &headers, &body)?;
                let parts = resp
                    .pointer("/candidates/0/content/parts")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ProviderError::BadResponse("missing candidates[0].content.parts".into()))?;
                Ok(parts
                    .iter()
                    .filter_map(|p| p.get("text").and_then(Value::as_str))
                    .collect::<String>())
            }
        }
    }
}

/// Serves `<fixtures>/<class_id>.txt` verbatim.
pub struct CannedProvider {
    id: String,
    model: String,
    dir: PathBuf,
}

impl CannedProvider {
    pub fn new(id: &str, model: &str, dir: PathBuf) -> Self {
        Self {
            id: id.to_owned(),
            model: model.to_owned(),
            dir,
        }
    }
}

impl GenerativeProvider for CannedProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, _prompt: &str, class: &FoodClass) -> Result<String, ProviderError> {
        let path = self.dir.join(format!("{}.txt", class.id()));
        std::fs::read_to_string(&path)
            .map_err(|e| ProviderError::Unavailable(format!("no canned response at {}: {e}", path.display())))
    }
}

/// Returns the prompt unchanged.
pub struct EchoProvider {
    id: String,
}

impl EchoProvider {
    pub fn new(id: &str) -> Self {
        Self { id: id.to_owned() }
    }
}

impl GenerativeProvider for EchoProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn model(&self) -> &str {
        "echo"
    }

    fn complete(&self, prompt: &str, _class: &FoodClass) -> Result<String, ProviderError> {
        Ok(prompt.to_owned())
    }
}

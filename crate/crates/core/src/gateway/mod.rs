//! Prompt construction, provider access with caching and retry, and
//! structured-output parsing.
//!
//! Responses are cached under a key derived from (template version,
//! provider, model, class). The raw text is persisted before it is parsed,
//! so a parser change never requires re-querying a provider.

pub mod cache;
pub mod parse;
pub mod prompt;
pub mod provider;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::limit::InFlightLimit;
use crate::model::{FoodClass, GeneratedKnowledge, ParseError};

pub use cache::{CacheMeta, ResponseCache};
pub use parse::{extract_json_block, parse_knowledge, ExtractMode};
pub use prompt::{build_prompt, prompt_hash, PromptTemplate};
pub use provider::{GenerativeProvider, ProviderConfig, ProviderError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerateError {
    #[error("provider unavailable after {attempts} attempt(s): {message}")]
    ProviderUnavailable { attempts: u32, message: String },
    #[error("API key environment variable {0} is not set")]
    AuthMissing(String),
    #[error("timed out after {attempts} attempt(s): {message}")]
    Timeout { attempts: u32, message: String },
    #[error("response cache: {0}")]
    Cache(String),
}

impl GenerateError {
    pub fn kind(&self) -> &'static str {
        match self {
            GenerateError::ProviderUnavailable { .. } => "ProviderUnavailable",
            GenerateError::AuthMissing(_) => "AuthMissing",
            GenerateError::Timeout { .. } => "Timeout",
            GenerateError::Cache(_) => "Cache",
        }
    }
}

/// Exponential backoff applied to transient provider failures only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << retry.min(20)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub raw: String,
    pub outcome: Result<GeneratedKnowledge, ParseError>,
    pub from_cache: bool,
    pub prompt_hash: String,
    pub latency_ms: f64,
}

pub struct Gateway {
    provider: Box<dyn GenerativeProvider>,
    template: PromptTemplate,
    cache: ResponseCache,
    retry: RetryPolicy,
    limit: InFlightLimit,
    extract: ExtractMode,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Gateway {
    pub fn new(
        provider: Box<dyn GenerativeProvider>,
        template: PromptTemplate,
        cache: ResponseCache,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Self {
        Self {
            provider,
            template,
            cache,
            retry,
            limit: InFlightLimit::new(max_in_flight),
            extract: ExtractMode::Balanced,
            key_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_config(
        cfg: &ProviderConfig,
        template: PromptTemplate,
        cache: ResponseCache,
    ) -> Result<Self, provider::ProviderConfigError> {
        let retry = RetryPolicy {
            max_retries: cfg.max_retries,
            backoff_base_ms: cfg.backoff_base_ms,
        };
        Ok(Self::new(cfg.build()?, template, cache, retry, cfg.max_in_flight))
    }

    pub fn with_extract_mode(mut self, mode: ExtractMode) -> Self {
        self.extract = mode;
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn model(&self) -> &str {
        self.provider.model()
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn cache_key(&self, c: &FoodClass) -> String {
        prompt_hash(self.template.version(), self.provider_id(), self.model(), c)
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(key.to_owned()).or_default().clone()
    }

    /// Cache-first generation for class `c`. Concurrent calls for the same
    /// key are serialized so the provider is queried at most once.
    pub fn generate(&self, c: &FoodClass) -> Result<Generation, GenerateError> {
        let key = self.cache_key(c);
        let lock = self.key_lock(&key);
        let _held = lock.lock().unwrap_or_else(|e| e.into_inner());

        let cached = self
            .cache
            .load(self.provider_id(), &key)
            .map_err(|e| GenerateError::Cache(e.to_string()))?;
        if let Some((raw, meta)) = cached {
            return Ok(self.finish(raw, key, true, meta.latency_ms));
        }

        let prompt = build_prompt(c, &self.template);
        let started = Instant::now();
        let raw = self.call_with_retry(&prompt, c)?;
        let latency_ms = round_ms(started.elapsed());

        let meta = CacheMeta {
            key: key.clone(),
            provider_id: self.provider_id().to_owned(),
            model: self.model().to_owned(),
            template_version: self.template.version().to_owned(),
            class_id: c.id().to_owned(),
            fetched_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            latency_ms,
        };
        self.cache
            .store(&raw, &meta)
            .map_err(|e| GenerateError::Cache(e.to_string()))?;
        Ok(self.finish(raw, key, false, latency_ms))
    }

    fn finish(&self, raw: String, key: String, from_cache: bool, latency_ms: f64) -> Generation {
        let outcome = parse::parse_knowledge_with(&raw, self.extract);
        Generation {
            raw,
            outcome,
            from_cache,
            prompt_hash: key,
            latency_ms,
        }
    }

    fn call_with_retry(&self, prompt: &str, c: &FoodClass) -> Result<String, GenerateError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limit.acquire();
                self.provider.complete(prompt, c)
            };
            match result {
                Ok(raw) => return Ok(raw),
                Err(ProviderError::AuthMissing(var)) => return Err(GenerateError::AuthMissing(var)),
                Err(e) if e.is_transient() && attempt <= self.retry.max_retries => {
                    std::thread::sleep(self.retry.delay(attempt - 1));
                }
                Err(ProviderError::Timeout(message)) => {
                    return Err(GenerateError::Timeout {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => {
                    return Err(GenerateError::ProviderUnavailable {
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        }
    }
}

/// Milliseconds rounded to microsecond resolution.
pub(crate) fn round_ms(d: Duration) -> f64 {
    (d.as_secs_f64() * 1e6).round() / 1e3
}

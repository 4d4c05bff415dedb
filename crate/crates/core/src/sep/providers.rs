//! Embedding back ends: a deterministic hashed bag-of-tokens stub, a
//! precomputed-embedding file, and a remote JSON embedding API.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{EmbeddingVector, SepError};
use crate::http::{self, HttpError};
use crate::limit::InFlightLimit;
use crate::metrics::text::tokenize;

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    /// One unit-normalized vector per text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SepError>;
}

pub fn text_sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub const STUB_DIM: usize = 64;

/// Token counts hashed (FNV-1a) into `dim` buckets, then L2-normalized.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
    id: String,
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            id: format!("stub-hash{}", dim.max(1)),
        }
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, SepError> {
        let mut values = vec![0.0; self.dim];
        for token in tokenize(text).tokens() {
            values[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        EmbeddingVector::new(values, &self.id)
    }
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self::new(STUB_DIM)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for StubEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SepError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// One line of a precomputed-embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingLine {
    pub text_sha256: String,
    pub provider_id: String,
    pub dim: usize,
    pub values: Vec<f64>,
}

/// Looks up vectors by the SHA-256 of the text.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    id: String,
    vectors: HashMap<String, Vec<f64>>,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self, SepError> {
        let unavailable = |m: String| SepError::ProviderUnavailable(format!("{}: {m}", path.display()));
        let file = std::fs::File::open(path).map_err(|e| unavailable(e.to_string()))?;
        let mut id: Option<String> = None;
        let mut dim: Option<usize> = None;
        let mut vectors = HashMap::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| unavailable(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: EmbeddingLine =
                serde_json::from_str(&line).map_err(|e| unavailable(format!("line {}: {e}", i + 1)))?;
            if entry.values.len() != entry.dim {
                return Err(unavailable(format!(
                    "line {}: dim {} but {} values",
                    i + 1,
                    entry.dim,
                    entry.values.len()
                )));
            }
            if *id.get_or_insert_with(|| entry.provider_id.clone()) != entry.provider_id {
                return Err(unavailable(format!("line {}: mixed provider ids", i + 1)));
            }
            if *dim.get_or_insert(entry.dim) != entry.dim {
                return Err(unavailable(format!("line {}: mixed dimensions", i + 1)));
            }
            vectors.insert(entry.text_sha256, entry.values);
        }
        Ok(Self {
            id: id.unwrap_or_else(|| "file-empty".to_owned()),
            vectors,
        })
    }
}

impl EmbeddingProvider for FileEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SepError> {
        texts
            .iter()
            .map(|t| {
                let key = text_sha256(t);
                let values = self
                    .vectors
                    .get(&key)
                    .ok_or_else(|| SepError::ProviderUnavailable(format!("missing key {key}")))?;
                EmbeddingVector::new(values.clone(), &self.id)
            })
            .collect()
    }
}

/// Writes `texts` embedded by `provider` in the precomputed-file format.
pub fn export_embeddings<W: Write>(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    mut out: W,
) -> Result<(), SepError> {
    let vectors = provider.embed(texts)?;
    for (t, v) in texts.iter().zip(vectors) {
        let line = EmbeddingLine {
            text_sha256: text_sha256(t),
            provider_id: v.provider_id().to_owned(),
            dim: v.dim(),
            values: v.values().to_vec(),
        };
        let json = serde_json::to_string(&line).map_err(|e| SepError::ProviderUnavailable(e.to_string()))?;
        writeln!(out, "{json}").map_err(|e| SepError::ProviderUnavailable(e.to_string()))?;
    }
    Ok(())
}

fn default_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    30
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_seconds: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

/// `POST endpoint {model, input: [..]}` returning `{data: [{embedding}]}`.
/// Results are cached in memory by text hash.
pub struct RemoteEmbedder {
    cfg: RemoteEmbedderConfig,
    id: String,
    agent: ureq::Agent,
    limit: InFlightLimit,
    cache: RwLock<HashMap<String, Vec<f64>>>,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedderConfig) -> Self {
        Self {
            id: format!("remote:{}", cfg.model),
            agent: http::agent(Duration::from_secs(cfg.timeout_seconds)),
            limit: InFlightLimit::new(cfg.max_in_flight),
            cache: RwLock::new(HashMap::new()),
            cfg,
        }
    }

    pub fn load(path: &Path) -> Result<Self, SepError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SepError::ProviderUnavailable(format!("{}: {e}", path.display())))?;
        let cfg = serde_json::from_str(&text)
            .map_err(|e| SepError::ProviderUnavailable(format!("{}: {e}", path.display())))?;
        Ok(Self::new(cfg))
    }

    fn request(&self, batch: &[String]) -> Result<Vec<Vec<f64>>, SepError> {
        let mut headers = Vec::new();
        if let Some(var) = &self.cfg.api_key_env {
            let key = std::env::var(var)
                .ok()
                .filter(|v| !v.is_empty())
                .ok_or_else(|| SepError::ProviderUnavailable(format!("API key variable {var} is not set")))?;
            headers.push(("Authorization", format!("Bearer {key}")));
        }
        let body = json!({"model": self.cfg.model, "input": batch});
        let resp = {
            let _permit = self.limit.acquire();
            http::post_json(&self.agent, &self.cfg.endpoint, &headers, &body)
        }
        .map_err(|e| match e {
            HttpError::Status { status: 429, body } => SepError::QuotaExceeded(body),
            other => SepError::ProviderUnavailable(other.to_string()),
        })?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| SepError::ProviderUnavailable("response lacks data[]".into()))?;
        if data.len() != batch.len() {
            return Err(SepError::ProviderUnavailable(format!(
                "asked for {} embeddings, got {}",
                batch.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|d| {
                d.get("embedding")
                    .and_then(Value::as_array)
                    .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| SepError::ProviderUnavailable("malformed embedding".into()))
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SepError> {
        let keys: Vec<String> = texts.iter().map(|t| text_sha256(t)).collect();
        let mut missing: Vec<(String, String)> = {
            let cache = self.cache.read().unwrap_or_else(|e| e.into_inner());
            keys.iter()
                .zip(texts)
                .filter(|(k, _)| !cache.contains_key(*k))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect()
        };
        missing.sort();
        missing.dedup();

        let batches: Vec<&[(String, String)]> = missing.chunks(self.cfg.batch_size.max(1)).collect();
        let results: Vec<Result<Vec<Vec<f64>>, SepError>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .iter()
                .map(|batch| {
                    s.spawn(move || {
                        let texts: Vec<String> = batch.iter().map(|(_, t)| t.clone()).collect();
                        self.request(&texts)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("embedding worker panicked"))
                .collect()
        });
        for (batch, result) in batches.iter().zip(results) {
            let vectors = result?;
            let mut cache = self.cache.write().unwrap_or_else(|e| e.into_inner());
            for ((key, _), v) in batch.iter().zip(vectors) {
                cache.insert(key.clone(), v);
            }
        }

        let cache = self.cache.read().unwrap_or_else(|e| e.into_inner());
        keys.iter()
            .map(|k| EmbeddingVector::new(cache[k].clone(), &self.id))
            .collect()
    }
}

/// Parses `stub`, `file:PATH` or `remote:PATH` (a JSON
/// [`RemoteEmbedderConfig`] file).
pub fn embedder_from_spec(spec: &str) -> Result<Box<dyn EmbeddingProvider>, SepError> {
    if spec == "stub" {
        return Ok(Box::new(StubEmbedder::default()));
    }
    if let Some(path) = spec.strip_prefix("file:") {
        return Ok(Box::new(FileEmbedder::load(&PathBuf::from(path))?));
    }
    if let Some(path) = spec.strip_prefix("remote:") {
        return Ok(Box::new(RemoteEmbedder::load(&PathBuf::from(path))?));
    }
    Err(SepError::ProviderUnavailable(format!(
        "unknown embedder {spec:?}; expected stub, file:PATH or remote:PATH"
    )))
}

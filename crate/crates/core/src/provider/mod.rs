//! Text-generation and embedding access with caching, replay, and usage
//! accounting.
//!
//! A [`Provider`] wraps a [`TextGenerator`] and an [`Embedder`] behind a
//! content-addressed cache. The mode decides what happens on a miss:
//!
//! | mode           | on miss                         | persists |
//! |----------------|---------------------------------|----------|
//! | `live`         | call backend                    | no       |
//! | `record`       | call backend                    | yes      |
//! | `strict-replay`| [`ProviderError::ReplayMiss`]   | no       |
//! | `scripted`     | call the scripted backend       | yes      |

mod backend;
mod cache;
mod cost;
mod http;
mod scripted;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use backend::{Embedder, FixedEmbedder, HashingEmbedder, ScriptedBackend, TextGenerator};
pub use cache::{CacheRecord, EmbeddingRecord, JsonlStore, StoreRecord};
pub use cost::{cost_report, CostLine, ModelPrice, PriceTable, UsageRecord};
pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub use scripted::{ScriptedAnswer, ScriptedOracle};

pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("replay miss for key {key}")]
    ReplayMiss { key: String },
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("cache I/O: {0}")]
    Io(String),
}

impl ProviderError {
    /// Transport failures are the only retryable class.
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderMode {
    Live,
    Record,
    StrictReplay,
    Scripted,
}

impl ProviderMode {
    fn persists(self) -> bool {
        matches!(self, ProviderMode::Record | ProviderMode::Scripted)
    }
}

impl FromStr for ProviderMode {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "record" => Ok(Self::Record),
            "strict-replay" | "replay" => Ok(Self::StrictReplay),
            "scripted" => Ok(Self::Scripted),
            other => Err(ProviderError::Config(format!("unknown provider mode {other:?}"))),
        }
    }
}

impl fmt::Display for ProviderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Live => "live",
            Self::Record => "record",
            Self::StrictReplay => "strict-replay",
            Self::Scripted => "scripted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub sample_index: u32,
    /// Question the call is made for; used for accounting only and never
    /// part of the cache key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
}

impl GenerationRequest {
    pub fn new(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
            sample_index: 0,
            question_id: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_sample_index(mut self, sample_index: u32) -> Self {
        self.sample_index = sample_index;
        self
    }

    pub fn for_question(mut self, question_id: impl Into<String>) -> Self {
        self.question_id = Some(question_id.into());
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::Domain(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ProviderError::Domain(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 over the fields that identify a sample.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct KeyFields<'a> {
            model_id: &'a str,
            prompt: &'a str,
            temperature: f64,
            top_p: f64,
            max_tokens: u32,
            sample_index: u32,
        }
        let fields = KeyFields {
            model_id: &self.model_id,
            prompt: &self.prompt,
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            sample_index: self.sample_index,
        };
        digest_hex(&serde_json::to_vec(&fields).expect("key fields serialize"))
    }
}

/// Decoding parameters shared by every call of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub model_id: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_top_p() -> f64 {
    DEFAULT_TOP_P
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl GenerationSettings {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn request(&self, prompt: impl Into<String>) -> GenerationRequest {
        GenerationRequest {
            model_id: self.model_id.clone(),
            prompt: prompt.into(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            sample_index: 0,
            question_id: None,
        }
    }
}

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Token counts were estimated locally rather than reported by the
    /// backend.
    #[serde(default)]
    pub estimated: bool,
}

/// Backend-reported token usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Raw backend output before token accounting is settled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
        }
    }
}

/// `ceil(bytes / 4)`, the fallback token estimate.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

impl GenerationResponse {
    fn from_reply(req: &GenerationRequest, reply: BackendReply) -> Self {
        match reply.usage {
            Some(u) => Self {
                text: reply.text,
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
                estimated: false,
            },
            None => Self {
                prompt_tokens: estimate_tokens(&req.prompt),
                completion_tokens: estimate_tokens(&reply.text),
                text: reply.text,
                estimated: true,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ProviderError> {
        if values.is_empty() {
            return Err(ProviderError::Domain("embedding has dimension 0".into()));
        }
        Ok(Self { values })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// Counters a caller can audit after a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderStats {
    /// Every `generate` invocation, cached or not.
    pub generation_calls: u64,
    /// `generate` invocations that reached the backend.
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub embed_calls: u64,
    pub embed_backend_calls: u64,
}

#[derive(Default)]
struct Counters {
    generation_calls: AtomicU64,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
    embed_calls: AtomicU64,
    embed_backend_calls: AtomicU64,
}

pub struct Provider {
    mode: ProviderMode,
    generator: Option<Arc<dyn TextGenerator>>,
    embedder: Option<Arc<dyn Embedder>>,
    cache: JsonlStore<CacheRecord>,
    embed_cache: JsonlStore<EmbeddingRecord>,
    counters: Counters,
    usage: Mutex<Vec<UsageRecord>>,
    dimension: OnceLock<usize>,
}

impl fmt::Debug for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Provider")
            .field("mode", &self.mode)
            .field("stats", &self.stats())
            .finish()
    }
}

pub struct ProviderBuilder {
    mode: ProviderMode,
    generator: Option<Arc<dyn TextGenerator>>,
    embedder: Option<Arc<dyn Embedder>>,
    cache: Option<JsonlStore<CacheRecord>>,
    embed_cache: Option<JsonlStore<EmbeddingRecord>>,
}

impl ProviderBuilder {
    pub fn generator(mut self, g: impl TextGenerator + 'static) -> Self {
        self.generator = Some(Arc::new(g));
        self
    }

    pub fn shared_generator(mut self, g: Arc<dyn TextGenerator>) -> Self {
        self.generator = Some(g);
        self
    }

    pub fn embedder(mut self, e: impl Embedder + 'static) -> Self {
        self.embedder = Some(Arc::new(e));
        self
    }

    pub fn shared_embedder(mut self, e: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(e);
        self
    }

    pub fn cache(mut self, store: JsonlStore<CacheRecord>) -> Self {
        self.cache = Some(store);
        self
    }

    pub fn embed_cache(mut self, store: JsonlStore<EmbeddingRecord>) -> Self {
        self.embed_cache = Some(store);
        self
    }

    pub fn build(self) -> Result<Provider, ProviderError> {
        if self.mode != ProviderMode::StrictReplay && self.generator.is_none() {
            return Err(ProviderError::Config(format!(
                "mode {} needs a text generator",
                self.mode
            )));
        }
        Ok(Provider {
            mode: self.mode,
            generator: self.generator,
            embedder: self.embedder,
            cache: self.cache.unwrap_or_else(JsonlStore::in_memory),
            embed_cache: self.embed_cache.unwrap_or_else(JsonlStore::in_memory),
            counters: Counters::default(),
            usage: Mutex::new(Vec::new()),
            dimension: OnceLock::new(),
        })
    }
}

impl Provider {
    pub fn builder(mode: ProviderMode) -> ProviderBuilder {
        ProviderBuilder {
            mode,
            generator: None,
            embedder: None,
            cache: None,
            embed_cache: None,
        }
    }

    /// Scripted provider with an in-memory cache.
    pub fn scripted(g: impl TextGenerator + 'static) -> Self {
        Self::builder(ProviderMode::Scripted)
            .generator(g)
            .embedder(HashingEmbedder::default())
            .build()
            .expect("scripted provider has a generator")
    }

    pub fn mode(&self) -> ProviderMode {
        self.mode
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ProviderError> {
        req.validate()?;
        self.counters.generation_calls.fetch_add(1, Ordering::Relaxed);
        let key = req.cache_key();
        let (response, cached) = match self.cache.get(&key) {
            Some(record) => {
                self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                (record.response, true)
            }
            None => {
                let generator = match (self.mode, &self.generator) {
                    (ProviderMode::StrictReplay, _) => {
                        return Err(ProviderError::ReplayMiss { key })
                    }
                    (_, Some(g)) => g,
                    (_, None) => {
                        return Err(ProviderError::Config("no text generator".into()))
                    }
                };
                self.counters.backend_calls.fetch_add(1, Ordering::Relaxed);
                let reply = generator.complete(req)?;
                let response = GenerationResponse::from_reply(req, reply);
                let record = CacheRecord::new(key.clone(), req.clone(), response.clone());
                if self.mode.persists() {
                    self.cache.append(record)?;
                } else {
                    self.cache.insert(record);
                }
                (response, false)
            }
        };
        self.usage.lock().expect("usage lock").push(UsageRecord {
            question_id: req.question_id.clone().unwrap_or_default(),
            model_id: req.model_id.clone(),
            key,
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            estimated: response.estimated,
            cached,
        });
        Ok(response)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::Domain("cannot embed empty text".into()));
        }
        self.counters.embed_calls.fetch_add(1, Ordering::Relaxed);
        let embedder = self.embedder.as_ref();
        let model = embedder.map(|e| e.model_id()).unwrap_or_default();
        let key = EmbeddingRecord::key_for(&model, text);
        let vector = match self.embed_cache.get(&key) {
            Some(record) => record.vector,
            None => {
                if self.mode == ProviderMode::StrictReplay {
                    return Err(ProviderError::ReplayMiss { key });
                }
                let embedder = embedder
                    .ok_or_else(|| ProviderError::Config("no embedding backend".into()))?;
                self.counters
                    .embed_backend_calls
                    .fetch_add(1, Ordering::Relaxed);
                let vector = EmbeddingVector::new(embedder.embed(text)?)?;
                let record = EmbeddingRecord::new(key, model, text.to_string(), vector.clone());
                if self.mode.persists() {
                    self.embed_cache.append(record)?;
                } else {
                    self.embed_cache.insert(record);
                }
                vector
            }
        };
        let dim = *self.dimension.get_or_init(|| vector.dimension());
        if dim != vector.dimension() {
            return Err(ProviderError::Domain(format!(
                "embedding dimension {} differs from earlier {dim}",
                vector.dimension()
            )));
        }
        Ok(vector)
    }

    pub fn stats(&self) -> ProviderStats {
        ProviderStats {
            generation_calls: self.counters.generation_calls.load(Ordering::Relaxed),
            backend_calls: self.counters.backend_calls.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
            embed_calls: self.counters.embed_calls.load(Ordering::Relaxed),
            embed_backend_calls: self.counters.embed_backend_calls.load(Ordering::Relaxed),
        }
    }

    /// Usage records for every `generate` served so far, in call order.
    pub fn usage(&self) -> Vec<UsageRecord> {
        self.usage.lock().expect("usage lock").clone()
    }

    /// Removes and returns the usage records of one question, in call order.
    pub fn drain_usage(&self, question_id: &str) -> Vec<UsageRecord> {
        let mut usage = self.usage.lock().expect("usage lock");
        let (taken, kept) = std::mem::take(&mut *usage)
            .into_iter()
            .partition(|r| r.question_id == question_id);
        *usage = kept;
        taken
    }

    /// Lines skipped as corrupt when the caches were opened.
    pub fn corrupt_cache_lines(&self) -> usize {
        self.cache.corrupt_lines() + self.embed_cache.corrupt_lines()
    }

    pub fn cache_records(&self) -> Vec<CacheRecord> {
        self.cache.records()
    }
}

use std::collections::HashMap;
use std::sync::Arc;

use super::{BackendReply, GenerationRequest, ProviderError};
use sha2::{Digest, Sha256};

/// Something that turns a prompt into text.
pub trait TextGenerator: Send + Sync {
    fn complete(&self, req: &GenerationRequest) -> Result<BackendReply, ProviderError>;
}

/// Something that turns text into a vector.
pub trait Embedder: Send + Sync {
    fn model_id(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

impl<T: TextGenerator + ?Sized> TextGenerator for Arc<T> {
    fn complete(&self, req: &GenerationRequest) -> Result<BackendReply, ProviderError> {
        (**self).complete(req)
    }
}

type ScriptFn = dyn Fn(&GenerationRequest) -> String + Send + Sync;

/// Generator driven by a closure; used for tests and offline runs.
#[derive(Clone)]
pub struct ScriptedBackend {
    script: Arc<ScriptFn>,
}

impl ScriptedBackend {
    pub fn new(script: impl Fn(&GenerationRequest) -> String + Send + Sync + 'static) -> Self {
        Self {
            script: Arc::new(script),
        }
    }

    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| text.clone())
    }
}

impl TextGenerator for ScriptedBackend {
    fn complete(&self, req: &GenerationRequest) -> Result<BackendReply, ProviderError> {
        Ok(BackendReply::text((self.script)(req)))
    }
}

/// Deterministic bag-of-words feature hashing, L2-normalized.
///
/// Texts sharing words get positive similarity, which is enough for offline
/// semantic ranking.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dimension: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dimension: 256 }
    }
}

impl Embedder for HashingEmbedder {
    fn model_id(&self) -> String {
        format!("hashing-bow-{}", self.dimension)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut v = vec![0.0; self.dimension];
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let word = word.to_lowercase();
            let h = Sha256::digest(word.as_bytes());
            let bucket = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize
                % self.dimension;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Punctuation-only text still gets a stable nonzero vector.
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Lookup-table embedder for tests.
#[derive(Debug, Clone, Default)]
pub struct FixedEmbedder {
    table: HashMap<String, Vec<f64>>,
}

impl FixedEmbedder {
    pub fn new(table: HashMap<String, Vec<f64>>) -> Self {
        Self { table }
    }

    /// Maps the i-th text to the i-th standard basis vector.
    pub fn one_hot<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let texts: Vec<String> = texts.into_iter().map(Into::into).collect();
        let n = texts.len();
        let table = texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                (t, v)
            })
            .collect();
        Self { table }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) {
        self.table.insert(text.into(), vector);
    }
}

impl Embedder for FixedEmbedder {
    fn model_id(&self) -> String {
        "fixed".to_string()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| ProviderError::Domain(format!("no fixed embedding for {text:?}")))
    }
}

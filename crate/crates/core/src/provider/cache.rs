//! Append-only line-delimited cache stores.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{digest_hex, EmbeddingVector, GenerationRequest, GenerationResponse, ProviderError};

/// A record addressable by a string key.
pub trait StoreRecord: Clone + Serialize + DeserializeOwned + Send + Sync {
    fn key(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub request: GenerationRequest,
    pub response: GenerationResponse,
    pub timestamp: String,
}

impl CacheRecord {
    pub fn new(key: String, request: GenerationRequest, response: GenerationResponse) -> Self {
        Self {
            key,
            request,
            response,
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    /// True when the stored key matches the one recomputed from the request.
    pub fn key_is_consistent(&self) -> bool {
        self.key == self.request.cache_key()
    }
}

impl StoreRecord for CacheRecord {
    fn key(&self) -> &str {
        &self.key
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub model_id: String,
    pub text: String,
    pub vector: EmbeddingVector,
    pub timestamp: String,
}

impl EmbeddingRecord {
    pub fn new(key: String, model_id: String, text: String, vector: EmbeddingVector) -> Self {
        Self {
            key,
            model_id,
            text,
            vector,
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn key_for(model_id: &str, text: &str) -> String {
        let payload = serde_json::json!({ "embed": model_id, "text": text });
        digest_hex(payload.to_string().as_bytes())
    }
}

impl StoreRecord for EmbeddingRecord {
    fn key(&self) -> &str {
        &self.key
    }
}

/// Keyed records held in memory, optionally mirrored to a JSONL file.
///
/// Readers share a lock; appends are serialized through the writer mutex.
/// The first record stored under a key wins.
pub struct JsonlStore<R: StoreRecord> {
    path: Option<PathBuf>,
    map: RwLock<HashMap<String, R>>,
    order: Mutex<Vec<String>>,
    writer: Mutex<Option<File>>,
    corrupt: usize,
}

impl<R: StoreRecord> JsonlStore<R> {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            map: RwLock::new(HashMap::new()),
            order: Mutex::new(Vec::new()),
            writer: Mutex::new(None),
            corrupt: 0,
        }
    }

    /// Opens `path`, loading any existing lines. Lines that fail to parse
    /// are skipped with a warning and counted. The file is created lazily
    /// on first append.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref().to_path_buf();
        let mut map = HashMap::new();
        let mut order = Vec::new();
        let mut corrupt = 0;
        if path.exists() {
            let file = File::open(&path).map_err(|e| ProviderError::Io(e.to_string()))?;
            for (lineno, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| ProviderError::Io(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<R>(&line) {
                    Ok(rec) => {
                        let key = rec.key().to_string();
                        if let std::collections::hash_map::Entry::Vacant(slot) = map.entry(key) {
                            order.push(slot.key().clone());
                            slot.insert(rec);
                        }
                    }
                    Err(err) => {
                        tracing::warn!(
                            path = %path.display(),
                            line = lineno + 1,
                            %err,
                            "skipping corrupt cache line"
                        );
                        corrupt += 1;
                    }
                }
            }
        }
        Ok(Self {
            path: Some(path),
            map: RwLock::new(map),
            order: Mutex::new(order),
            writer: Mutex::new(None),
            corrupt,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<R> {
        self.map.read().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn corrupt_lines(&self) -> usize {
        self.corrupt
    }

    /// Stores in memory only. Returns false if the key was already present.
    pub fn insert(&self, record: R) -> bool {
        let mut map = self.map.write().expect("cache lock");
        if map.contains_key(record.key()) {
            return false;
        }
        self.order
            .lock()
            .expect("order lock")
            .push(record.key().to_string());
        map.insert(record.key().to_string(), record);
        true
    }

    /// Stores and, for file-backed stores, appends one JSON line.
    pub fn append(&self, record: R) -> Result<(), ProviderError> {
        let line = serde_json::to_string(&record).map_err(|e| ProviderError::Io(e.to_string()))?;
        if !self.insert(record) {
            return Ok(());
        }
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut writer = self.writer.lock().expect("writer lock");
        if writer.is_none() {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| ProviderError::Io(e.to_string()))?;
                }
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| ProviderError::Io(e.to_string()))?;
            *writer = Some(file);
        }
        let file = writer.as_mut().expect("writer opened");
        writeln!(file, "{line}").map_err(|e| ProviderError::Io(e.to_string()))?;
        file.flush().map_err(|e| ProviderError::Io(e.to_string()))
    }

    /// Records in insertion order.
    pub fn records(&self) -> Vec<R> {
        let map = self.map.read().expect("cache lock");
        self.order
            .lock()
            .expect("order lock")
            .iter()
            .filter_map(|k| map.get(k).cloned())
            .collect()
    }
}

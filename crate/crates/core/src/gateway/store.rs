//! Content-addressed response store.
//!
//! On disk, each record is one pretty-printed JSON file:
//!
//! ```text
//! <root>/chat/<key[0..2]>/<key>.json         ChatRecord
//! <root>/embeddings/<key[0..2]>/<key>.json   EmbeddingRecord
//! ```
//!
//! `key` is the hex SHA-256 request digest (see
//! [`ChatRequest::cache_key`](super::ChatRequest::cache_key)). Records are
//! written once through a temp file and rename, so a store directory can be
//! committed as replay fixtures.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{text_digest, ChatRequest, Completion, GatewayError};

pub const CHAT_RECORD_FORMAT: &str = "amicl.chat.v1";
pub const EMBEDDING_RECORD_FORMAT: &str = "amicl.embedding.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRecord {
    pub format: String,
    pub key: String,
    pub request: ChatRequest,
    pub response: Completion,
}

impl ChatRecord {
    pub fn new(key: String, request: &ChatRequest, response: Completion) -> Self {
        ChatRecord {
            format: CHAT_RECORD_FORMAT.to_string(),
            key,
            request: request.clone(),
            response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub format: String,
    pub key: String,
    pub model: String,
    pub text: String,
    pub text_sha256: String,
    pub values: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(key: String, model: &str, text: &str, values: Vec<f64>) -> Self {
        EmbeddingRecord {
            format: EMBEDDING_RECORD_FORMAT.to_string(),
            key,
            model: model.to_string(),
            text: text.to_string(),
            text_sha256: text_digest(text),
            values,
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    dir: Option<PathBuf>,
    chat: Mutex<HashMap<String, ChatRecord>>,
    embeddings: Mutex<HashMap<String, EmbeddingRecord>>,
    writer: Mutex<()>,
}

/// Shared handle to a response store. Clones refer to the same store.
#[derive(Debug, Clone, Default)]
pub struct ResponseStore {
    inner: Arc<Inner>,
}

impl ResponseStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| store_err(&dir, e))?;
        Ok(ResponseStore {
            inner: Arc::new(Inner {
                dir: Some(dir),
                ..Default::default()
            }),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.inner.dir.as_deref()
    }

    /// Entries held in memory, i.e. read or written by this process.
    pub fn len(&self) -> usize {
        self.inner.chat.lock().unwrap().len() + self.inner.embeddings.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_chat(&self, key: &str) -> Result<Option<ChatRecord>, GatewayError> {
        self.get(&self.inner.chat, "chat", key)
    }

    pub fn put_chat(&self, record: ChatRecord) -> Result<(), GatewayError> {
        self.put(&self.inner.chat, "chat", record.key.clone(), record)
    }

    pub fn get_embedding(&self, key: &str) -> Result<Option<EmbeddingRecord>, GatewayError> {
        self.get(&self.inner.embeddings, "embeddings", key)
    }

    pub fn put_embedding(&self, record: EmbeddingRecord) -> Result<(), GatewayError> {
        self.put(&self.inner.embeddings, "embeddings", record.key.clone(), record)
    }

    fn path(&self, kind: &str, key: &str) -> Option<PathBuf> {
        let dir = self.inner.dir.as_ref()?;
        let shard = key.get(..2).unwrap_or("xx");
        Some(dir.join(kind).join(shard).join(format!("{key}.json")))
    }

    fn get<T: Clone + DeserializeOwned>(
        &self,
        memory: &Mutex<HashMap<String, T>>,
        kind: &str,
        key: &str,
    ) -> Result<Option<T>, GatewayError> {
        if let Some(hit) = memory.lock().unwrap().get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.path(kind, key) else {
            return Ok(None);
        };
        let bytes = match std::fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(store_err(&path, e)),
        };
        let record: T = serde_json::from_slice(&bytes).map_err(|e| store_err(&path, e))?;
        memory.lock().unwrap().insert(key.to_string(), record.clone());
        Ok(Some(record))
    }

    fn put<T: Serialize>(
        &self,
        memory: &Mutex<HashMap<String, T>>,
        kind: &str,
        key: String,
        record: T,
    ) -> Result<(), GatewayError> {
        let _writer = self.inner.writer.lock().unwrap();
        if let Some(path) = self.path(kind, &key) {
            let parent = path.parent().expect("record path has a parent");
            std::fs::create_dir_all(parent).map_err(|e| store_err(parent, e))?;
            let mut json = serde_json::to_vec_pretty(&record).map_err(|e| store_err(&path, e))?;
            json.push(b'\n');
            let tmp = path.with_extension("json.tmp");
            std::fs::write(&tmp, &json).map_err(|e| store_err(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| store_err(&path, e))?;
        }
        memory.lock().unwrap().insert(key, record);
        Ok(())
    }
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Store {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

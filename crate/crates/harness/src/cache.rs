//! Content-addressed on-disk cache for model and judge calls.
//!
//! Entries live at `<root>/<first two hex chars>/<sha256>.json`. Writes go
//! through a temporary file and an atomic rename, so concurrent writers of
//! the same key race harmlessly and readers never see partial records.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chat::{BackendError, ChatModel, ChatReply, ChatRequest};

/// SHA-256 over the model id and payload, length-prefixed so that the
/// boundary between the two is unambiguous.
pub fn cache_key(model_id: &str, payload: &str) -> String {
    let mut h = Sha256::new();
    h.update((model_id.len() as u64).to_le_bytes());
    h.update(model_id.as_bytes());
    h.update(payload.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct ContentCache {
    root: PathBuf,
}

impl ContentCache {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ContentCache { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("__");
        self.root.join(shard).join(format!("{key}.json"))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path_for(key).is_file()
    }

    /// Missing, unreadable and corrupt entries all read as a miss.
    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let path = self.path_for(key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> io::Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().unwrap_or(&self.root);
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&mut tmp, value)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        walk_json(&self.root).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk_json(root: &Path) -> impl Iterator<Item = PathBuf> {
    fs::read_dir(root)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().is_dir())
        .flat_map(|shard| fs::read_dir(shard.path()).into_iter().flatten().flatten())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedReply {
    model: String,
    reply: ChatReply,
}

/// Memoizes a model's replies keyed by model id and canonical request JSON.
#[derive(Clone)]
pub struct CachedChatModel<M> {
    inner: M,
    cache: Arc<ContentCache>,
}

impl<M: ChatModel> CachedChatModel<M> {
    pub fn new(inner: M, cache: Arc<ContentCache>) -> Self {
        CachedChatModel { inner, cache }
    }

    pub fn key_for(&self, request: &ChatRequest) -> String {
        let payload = serde_json::to_string(request).expect("chat requests serialize");
        cache_key(self.inner.id(), &payload)
    }
}

impl<M: ChatModel> ChatModel for CachedChatModel<M> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        let key = self.key_for(request);
        if let Some(hit) = self.cache.get::<CachedReply>(&key) {
            return Ok(hit.reply);
        }
        let reply = self.inner.complete(request)?;
        let record = CachedReply {
            model: self.inner.id().to_string(),
            reply: reply.clone(),
        };
        if let Err(e) = self.cache.put(&key, &record) {
            log::warn!("failed to write cache entry {key}: {e}");
        }
        Ok(reply)
    }
}

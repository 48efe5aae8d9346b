//! Content-addressed response cache.
//!
//! One file per request under the cache directory, named by the hex SHA-256
//! of the model id, every message, and the decoding parameters. A file holds
//! a short header followed by the raw response bytes:
//!
//! ```text
//! convograph-cache 1
//! model: gpt-4o
//! timestamp: 1760000000
//! length: 123
//!
//! <raw response>
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use super::{ChatClient, ChatRequest, LlmError};
use crate::error::{Error, Result};

const MAGIC: &str = "convograph-cache 1";
const LOCK_STRIPES: usize = 64;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash over everything that determines a completion.
pub fn request_key(request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    let mut field = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    field(request.model.as_bytes());
    for m in &request.messages {
        field(serde_json::to_string(&m.role).unwrap_or_default().as_bytes());
        field(m.content.as_bytes());
    }
    field(&request.temperature.to_le_bytes());
    field(&request.max_tokens.to_le_bytes());
    hex(&hasher.finalize())
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    stripes: Vec<Mutex<()>>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            stripes: (0..LOCK_STRIPES).map(|_| Mutex::new(())).collect(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn stripe(&self, key: &str) -> &Mutex<()> {
        let idx = usize::from_str_radix(&key[..2.min(key.len())], 16).unwrap_or(0) % LOCK_STRIPES;
        &self.stripes[idx]
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    /// Returns the cached response, or `None` on a miss. Unreadable or
    /// corrupt entries count as misses.
    pub fn get(&self, key: &str) -> Option<String> {
        let _guard = self.stripe(key).lock().unwrap_or_else(|e| e.into_inner());
        let bytes = match std::fs::read(self.path(key)) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                tracing::warn!(%key, error = %e, "unreadable cache entry treated as miss");
                return None;
            }
        };
        match parse_entry(&bytes) {
            Some(body) => Some(body),
            None => {
                tracing::warn!(%key, "corrupt cache entry treated as miss");
                None
            }
        }
    }

    pub fn put(&self, key: &str, model: &str, response: &str) -> Result<()> {
        let _guard = self.stripe(key).lock().unwrap_or_else(|e| e.into_inner());
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let model = model.replace(['\n', '\r'], " ");
        let mut contents = format!(
            "{MAGIC}\nmodel: {model}\ntimestamp: {timestamp}\nlength: {}\n\n",
            response.len()
        )
        .into_bytes();
        contents.extend_from_slice(response.as_bytes());
        let tmp = self.dir.join(format!(".{key}.tmp"));
        let write = || -> std::io::Result<()> {
            let mut file = std::fs::File::create(&tmp)?;
            file.write_all(&contents)?;
            file.sync_all()?;
            std::fs::rename(&tmp, self.path(key))
        };
        write().map_err(|e| Error::io(self.path(key), e))
    }
}

fn parse_entry(bytes: &[u8]) -> Option<String> {
    let text = std::str::from_utf8(bytes).ok()?;
    let (header, body) = text.split_once("\n\n")?;
    let mut lines = header.lines();
    if lines.next()? != MAGIC {
        return None;
    }
    let length: usize = lines
        .find_map(|l| l.strip_prefix("length: "))
        .and_then(|v| v.parse().ok())?;
    (body.len() == length).then(|| body.to_string())
}

/// Serves completions from a [`ResponseCache`], calling the inner client only
/// on a miss.
pub struct CachedClient<C> {
    inner: C,
    cache: ResponseCache,
}

impl<C> CachedClient<C> {
    pub fn new(inner: C, cache: ResponseCache) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: ChatClient> ChatClient for CachedClient<C> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let key = request_key(request);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let response = self.inner.complete(request)?;
        if let Err(err) = self.cache.put(&key, &request.model, &response) {
            tracing::warn!(%err, "failed to persist cache entry");
        }
        Ok(response)
    }
}

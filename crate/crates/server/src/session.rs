//! In-memory sessions, each behind its own async mutex so turns of one
//! session are processed in order while different sessions run concurrently.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use convograph::corpus::Turn;
use convograph::kg::{EntityId, ItemId, KnowledgeGraph};
use serde::{Deserialize, Serialize};

use crate::error::ServerError;

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    /// User turns, oldest first.
    pub turns: Vec<Turn>,
    /// Linked entities in first-mention order; only ever grows.
    pub entities: Vec<EntityId>,
    pub recommended: Vec<ItemId>,
}

impl Session {
    pub fn new(id: String) -> Self {
        Self {
            id,
            turns: Vec::new(),
            entities: Vec::new(),
            recommended: Vec::new(),
        }
    }

    pub fn add_entities(&mut self, entities: &[EntityId]) {
        for &e in entities {
            if !self.entities.contains(&e) {
                self.entities.push(e);
            }
        }
    }

    pub fn add_recommended(&mut self, items: &[ItemId]) {
        for &i in items {
            if !self.recommended.contains(&i) {
                self.recommended.push(i);
            }
        }
    }
}

pub type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

#[derive(Default)]
pub struct SessionStore {
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

/// Snapshot form: ids are catalog keys so a snapshot stays readable after
/// the index is rebuilt.
#[derive(Debug, Serialize, Deserialize)]
struct StoredSession {
    id: String,
    turns: Vec<Turn>,
    entities: Vec<String>,
    recommended: Vec<String>,
}

impl SessionStore {
    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        self.lock().get(id).cloned()
    }

    pub fn create(&self) -> SessionHandle {
        let id = uuid::Uuid::new_v4().to_string();
        let handle = Arc::new(tokio::sync::Mutex::new(Session::new(id.clone())));
        self.lock().insert(id, handle.clone());
        handle
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, SessionHandle>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Writes every session as JSON, sorted by id.
    pub async fn save(&self, path: &Path, kg: &KnowledgeGraph) -> Result<(), ServerError> {
        let handles: Vec<SessionHandle> = self.lock().values().cloned().collect();
        let mut stored = Vec::with_capacity(handles.len());
        for h in handles {
            let s = h.lock().await;
            stored.push(StoredSession {
                id: s.id.clone(),
                turns: s.turns.clone(),
                entities: s.entities.iter().map(|&e| kg.entity(e).key.clone()).collect(),
                recommended: s.recommended.iter().map(|&e| kg.entity(e).key.clone()).collect(),
            });
        }
        stored.sort_by(|a, b| a.id.cmp(&b.id));
        let body = serde_json::to_vec_pretty(&stored).map_err(|e| ServerError::Snapshot(e.to_string()))?;
        std::fs::write(path, body).map_err(|e| ServerError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Reads a snapshot; a missing file yields an empty store. Keys the
    /// catalog no longer has are dropped.
    pub fn load(path: &Path, kg: &KnowledgeGraph) -> Result<Self, ServerError> {
        let store = Self::default();
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(store),
            Err(e) => {
                return Err(ServerError::Io {
                    path: path.to_path_buf(),
                    source: e,
                })
            }
        };
        let stored: Vec<StoredSession> =
            serde_json::from_slice(&bytes).map_err(|e| ServerError::Snapshot(format!("{}: {e}", path.display())))?;
        let resolve = |keys: &[String]| -> Vec<EntityId> {
            keys.iter()
                .filter_map(|k| {
                    let id = kg.by_key(k);
                    if id.is_none() {
                        tracing::warn!(key = %k, "snapshot refers to an unknown entity");
                    }
                    id
                })
                .collect()
        };
        {
            let mut map = store.lock();
            for s in stored {
                let session = Session {
                    entities: resolve(&s.entities),
                    recommended: resolve(&s.recommended),
                    id: s.id.clone(),
                    turns: s.turns,
                };
                map.insert(s.id, Arc::new(tokio::sync::Mutex::new(session)));
            }
        }
        Ok(store)
    }
}

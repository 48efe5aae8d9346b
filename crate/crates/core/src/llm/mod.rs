//! Provider-agnostic chat-completion clients.
//!
//! [`ChatClient`] is the only surface the engine talks to. Implementations:
//! an HTTP client for chat-completion endpoints ([`http::HttpChatClient`]),
//! an on-disk response cache wrapper ([`cache::CachedClient`]), and
//! deterministic mocks for tests and offline runs ([`mock::MockChatClient`]).

pub mod cache;
pub mod http;
pub mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed completion payload: {0}")]
    Decode(String),
    #[error("llm unavailable: {0}")]
    Unavailable(String),
}

pub trait ChatClient: Send + Sync {
    fn model_id(&self) -> &str;

    /// Returns the raw text of the first completion choice.
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

impl<T: ChatClient + ?Sized> ChatClient for std::sync::Arc<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

/// Wraps a client and counts calls that reach it.
pub struct CountingClient<C> {
    inner: C,
    calls: AtomicUsize,
}

impl<C> CountingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<C: ChatClient> ChatClient for CountingClient<C> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
pub struct InflightLimit {
    available: Mutex<usize>,
    released: Condvar,
}

pub struct InflightPermit<'a> {
    limit: &'a InflightLimit,
}

impl InflightLimit {
    pub fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            released: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *available == 0 {
            available = self.released.wait(available).unwrap_or_else(|e| e.into_inner());
        }
        *available -= 1;
        InflightPermit { limit: self }
    }
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut available = self.limit.available.lock().unwrap_or_else(|e| e.into_inner());
        *available += 1;
        self.limit.released.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn inflight_limit_bounds_concurrency() {
        let limit = Arc::new(InflightLimit::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limit, active, peak) = (limit.clone(), active.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _permit = limit.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(10));
                    active.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}

//! Blocking HTTP client for OpenAI-style `/chat/completions` endpoints.

use std::sync::OnceLock;
use std::time::Duration;

use serde::Deserialize;

use super::{ChatClient, ChatRequest, InflightLimit, LlmError};

#[derive(Debug, Clone)]
pub struct HttpClientConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Retries after the first attempt.
    pub retries: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-2024-08-06".into(),
            api_key: None,
            retries: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            max_in_flight: 4,
        }
    }
}

pub struct HttpChatClient {
    config: HttpClientConfig,
    // Built on first use: a blocking client must not be created on an async
    // runtime thread.
    client: OnceLock<reqwest::blocking::Client>,
    inflight: InflightLimit,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Retry(String),
    Fatal(LlmError),
}

impl HttpChatClient {
    pub fn new(config: HttpClientConfig) -> Self {
        let inflight = InflightLimit::new(config.max_in_flight);
        Self {
            config,
            client: OnceLock::new(),
            inflight,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn http(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.config.timeout)
                .build()
                .expect("http client configuration is valid")
        })
    }

    fn attempt(&self, request: &ChatRequest) -> Result<String, Attempt> {
        let mut builder = self.http().post(self.endpoint()).json(request);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        let body = response.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}: {body}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(LlmError::Status {
                status: status.as_u16(),
                body,
            }));
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&body).map_err(|e| Attempt::Fatal(LlmError::Decode(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(LlmError::Decode("response has no message content".into())))
    }
}

impl ChatClient for HttpChatClient {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let _permit = self.inflight.acquire();
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff_base * 2u32.pow(attempt - 1));
            }
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(err)) => return Err(err),
                Err(Attempt::Retry(message)) => {
                    tracing::warn!(attempt = attempt + 1, %message, "chat completion attempt failed");
                    last = message;
                }
            }
        }
        Err(LlmError::Transport {
            attempts,
            message: last,
        })
    }
}

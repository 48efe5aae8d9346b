//! Deterministic chat clients for tests and offline runs.
//!
//! Mocks read the numbered candidate block out of the prompt the same way a
//! model would and answer in the ranking format the reranker requests.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ChatClient, ChatRequest, LlmError};
use crate::rerank::CANDIDATES_HEADER;

pub type ScriptFn = dyn Fn(&[String]) -> String + Send + Sync;

#[derive(Clone)]
pub enum MockBehavior {
    /// Ranks candidates exactly as presented.
    Identity,
    /// Ranks candidates in reverse.
    Reverse,
    /// Answers with prose that names no candidate.
    Prose,
    /// Mixes invented titles and near-misses into a shuffled ranking.
    Hallucinate,
    /// Fails every call as a transport error.
    Unavailable,
    /// Custom reply built from the candidate titles.
    Script(Arc<ScriptFn>),
}

impl std::fmt::Debug for MockBehavior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            MockBehavior::Identity => "Identity",
            MockBehavior::Reverse => "Reverse",
            MockBehavior::Prose => "Prose",
            MockBehavior::Hallucinate => "Hallucinate",
            MockBehavior::Unavailable => "Unavailable",
            MockBehavior::Script(_) => "Script",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone)]
pub struct MockChatClient {
    behavior: MockBehavior,
    model: String,
}

impl MockChatClient {
    pub fn new(behavior: MockBehavior) -> Self {
        Self {
            behavior,
            model: "mock".into(),
        }
    }

    pub fn script(f: impl Fn(&[String]) -> String + Send + Sync + 'static) -> Self {
        Self::new(MockBehavior::Script(Arc::new(f)))
    }
}

/// Candidate titles listed in the prompt, in presentation order.
pub fn prompt_candidates(request: &ChatRequest) -> Vec<String> {
    let Some(user) = request.messages.iter().rev().find(|m| m.role == super::Role::User) else {
        return Vec::new();
    };
    let mut titles = Vec::new();
    let mut inside = false;
    for line in user.content.lines() {
        if line.trim() == CANDIDATES_HEADER {
            inside = true;
            continue;
        }
        if !inside {
            continue;
        }
        if line.starts_with("## ") {
            break;
        }
        let Some((number, rest)) = line.split_once(". ") else {
            continue;
        };
        if number.chars().all(|c| c.is_ascii_digit()) && !number.is_empty() {
            let title = rest.split(" | ").next().unwrap_or(rest).trim();
            titles.push(title.to_string());
        }
    }
    titles
}

pub fn format_reply(ranking: &[String], reasoning: &str) -> String {
    let mut out = String::from("RANKING:\n");
    for (i, title) in ranking.iter().enumerate() {
        out.push_str(&format!("{}. {title}\n", i + 1));
    }
    out.push_str("\nREASONING:\n");
    out.push_str(reasoning);
    out.push('\n');
    out
}

fn prompt_seed(request: &ChatRequest) -> u64 {
    let mut hasher = Sha256::new();
    for m in &request.messages {
        hasher.update(m.content.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
}

fn hallucinate(candidates: &[String], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranking: Vec<String> = candidates.to_vec();
    ranking.shuffle(&mut rng);
    ranking.truncate(ranking.len().min(10));
    let inventions = [
        "The Phantom Reel (2031)".to_string(),
        "Quantum Heist Returns (1899)".to_string(),
        "Zzyzx Midnight Protocol (2042)".to_string(),
    ];
    let mut out = Vec::new();
    for (i, title) in ranking.into_iter().enumerate() {
        if i % 3 == 0 {
            out.push(inventions[rng.random_range(0..inventions.len())].clone());
        }
        if i % 4 == 1 {
            out.push(format!("{title} II: The Sequel Nobody Made"));
        }
        out.push(title.clone());
        if i % 5 == 2 {
            out.push(title);
        }
    }
    out.push("Some Film That Does Not Exist".into());
    format_reply(&out, "Picked a mix of favourites and a few others I remember.")
}

impl ChatClient for MockChatClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let candidates = prompt_candidates(request);
        let reply = match &self.behavior {
            MockBehavior::Identity => format_reply(&candidates, "Kept the retrieved order."),
            MockBehavior::Reverse => {
                let reversed: Vec<String> = candidates.iter().rev().cloned().collect();
                format_reply(&reversed, "Reversed the retrieved order.")
            }
            MockBehavior::Prose => "Honestly I think you would enjoy something with a lot of heart and a bit of \
                 adventure. Let me know what moods you prefer!"
                .to_string(),
            MockBehavior::Hallucinate => hallucinate(&candidates, prompt_seed(request)),
            MockBehavior::Unavailable => {
                return Err(LlmError::Transport {
                    attempts: 1,
                    message: "mock endpoint unavailable".into(),
                })
            }
            MockBehavior::Script(f) => f(&candidates),
        };
        Ok(reply)
    }
}

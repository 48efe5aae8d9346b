//! Wire types. Every body is JSON; unknown request fields are rejected.
//!
//! Entity, item and conversation ids on the wire are the keys used in the
//! catalog and corpus files, so they resolve against the served index.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub message: String,
    /// Number of retrieved candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Number of example conversations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedEntry {
    pub item_id: String,
    pub title: String,
    /// Retrieval score of the item.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRef {
    pub id: String,
    pub name: String,
    /// `mentioned` or `expanded`.
    pub provenance: String,
    /// Reasoner score; absent for mentioned entities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnBody {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleConversation {
    pub id: String,
    pub score: f64,
    pub turns: Vec<TurnBody>,
    pub accepted_items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evidence {
    /// Mentioned entities then expansions.
    pub seed_entities: Vec<EntityRef>,
    pub expanded_entities: Vec<EntityRef>,
    pub example_conversation_ids: Vec<String>,
    pub example_conversations: Vec<ExampleConversation>,
    /// Candidate pool in retrieval order.
    pub candidates: Vec<RankedEntry>,
    /// `graph`, `reasoner-only`, `lexical` or `popularity`.
    pub retrieval_method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendResponse {
    pub session_id: String,
    pub ranked: Vec<RankedEntry>,
    pub reasoning: String,
    pub evidence: Evidence,
    /// True when the model was unreachable and `ranked` is the retrieval
    /// order (served with status 503).
    pub degraded: bool,
    /// True when the model answered but none of its lines matched a candidate.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveResponse {
    pub candidates: Vec<RankedEntry>,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexSummary {
    pub entities: usize,
    pub items: usize,
    pub conversations: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
    pub model: String,
    pub index: IndexSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionResponse {
    pub session_id: String,
    pub turns: Vec<TurnBody>,
    pub entities: Vec<EntityRef>,
    pub recommended: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

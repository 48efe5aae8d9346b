//! HTTP service over a loaded index.
//!
//! | route | body | answer |
//! |---|---|---|
//! | `POST /v1/recommend` | [`api::RecommendRequest`] | [`api::RecommendResponse`]; 503 with the same body, `degraded: true`, when the model is unreachable |
//! | `POST /v1/retrieve` | [`api::RecommendRequest`] | [`api::RetrieveResponse`]; never calls the model and never changes the session |
//! | `GET /v1/health` | | [`api::HealthResponse`] |
//! | `GET /v1/session/{id}` | | [`api::SessionResponse`] |
//!
//! Errors use [`api::ErrorBody`] with status 400 (malformed body or
//! parameters), 404 (unknown session) or 500.

pub mod api;
pub mod error;
pub mod session;

use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use convograph::corpus::{History, Turn};
use convograph::index::Index;
use convograph::kg::EntityId;
use convograph::llm::ChatClient;
use convograph::pipeline::{Engine, Query, Recommendation, Retrieval, RetrievalMethod};
use convograph::reasoner::Provenance;

use api::*;
pub use error::{ApiError, ServerError};
use session::{Session, SessionHandle, SessionStore};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    client: Arc<dyn ChatClient>,
    sessions: Arc<SessionStore>,
}

impl AppState {
    /// Restores sessions from the configured snapshot, if any.
    pub fn new(engine: Arc<Engine>, client: Arc<dyn ChatClient>) -> Result<Self, ServerError> {
        let sessions = match &engine.config().server.snapshot_path {
            Some(path) => SessionStore::load(path, &engine.index().kg)?,
            None => SessionStore::default(),
        };
        Ok(Self {
            engine,
            client,
            sessions: Arc::new(sessions),
        })
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    /// Writes the session snapshot if one is configured.
    pub async fn save_sessions(&self) -> Result<(), ServerError> {
        if let Some(path) = &self.engine.config().server.snapshot_path {
            self.sessions.save(path, &self.engine.index().kg).await?;
            tracing::info!(path = %path.display(), sessions = self.sessions.len(), "sessions saved");
        }
        Ok(())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/recommend", post(recommend))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/health", get(health))
        .route("/v1/session/{id}", get(get_session))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then writes the session snapshot.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServerError::Serve)?;
    state.save_sessions().await
}

fn parse_body(body: Result<Json<RecommendRequest>, JsonRejection>) -> Result<RecommendRequest, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    if req.message.trim().is_empty() {
        return Err(ApiError::BadRequest("message must not be empty".into()));
    }
    if req.k == Some(0) {
        return Err(ApiError::BadRequest("k must be at least 1".into()));
    }
    Ok(req)
}

fn existing_session(state: &AppState, id: &str) -> Result<SessionHandle, ApiError> {
    state
        .sessions
        .get(id)
        .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
}

fn query_for(session: &Session, req: &RecommendRequest, exclude_prior: bool) -> Query {
    let mut turns = session.turns.clone();
    turns.push(Turn::user(req.message.clone()));
    Query {
        history: History::from_turns(turns),
        exclude_items: if exclude_prior {
            session.recommended.clone()
        } else {
            Vec::new()
        },
        exclude_conversation: None,
        k: req.k,
        n: req.n,
    }
}

async fn recommend(State(state): State<AppState>, body: Result<Json<RecommendRequest>, JsonRejection>) -> Response {
    match recommend_inner(state, body).await {
        Ok((status, body)) => (status, Json(body)).into_response(),
        Err(err) => err.into_response(),
    }
}

async fn recommend_inner(
    state: AppState,
    body: Result<Json<RecommendRequest>, JsonRejection>,
) -> Result<(StatusCode, RecommendResponse), ApiError> {
    let req = parse_body(body)?;
    let handle = match &req.session_id {
        Some(id) => existing_session(&state, id)?,
        None => state.sessions.create(),
    };
    let mut session = handle.lock().await;
    let query = query_for(&session, &req, state.engine.config().retrieval.exclude_prior);

    let engine = state.engine.clone();
    let client = state.client.clone();
    let rec = tokio::task::spawn_blocking(move || {
        let r = engine.recommend(&query, client.as_ref());
        (query, r)
    })
    .await
    .map_err(|e| ApiError::Internal(format!("pipeline task failed: {e}")))?;
    let (query, rec) = (rec.0, rec.1?);

    session
        .turns
        .push(query.history.turns.last().expect("message appended").clone());
    session.add_entities(&rec.retrieval.mentioned);
    let remember = state.engine.config().server.remember_top;
    let shown: Vec<EntityId> = rec.result.ranked_items.iter().take(remember).copied().collect();
    session.add_recommended(&shown);

    let index = state.engine.index();
    let body = recommend_body(index, &session.id, &rec);
    let status = if rec.llm_error.is_some() {
        StatusCode::SERVICE_UNAVAILABLE
    } else {
        StatusCode::OK
    };
    Ok((status, body))
}

async fn retrieve(
    State(state): State<AppState>,
    body: Result<Json<RecommendRequest>, JsonRejection>,
) -> Result<Json<RetrieveResponse>, ApiError> {
    let req = parse_body(body)?;
    let base = match &req.session_id {
        Some(id) => existing_session(&state, id)?.lock().await.clone(),
        None => Session::new(String::new()),
    };
    let query = query_for(&base, &req, state.engine.config().retrieval.exclude_prior);
    let engine = state.engine.clone();
    let retrieval = tokio::task::spawn_blocking(move || engine.retrieve(&query))
        .await
        .map_err(|e| ApiError::Internal(format!("retrieval task failed: {e}")))??;
    let index = state.engine.index();
    Ok(Json(RetrieveResponse {
        candidates: candidate_entries(index, &retrieval),
        evidence: evidence(index, &retrieval),
    }))
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    let index = state.engine.index();
    let stats = index.stats();
    Json(HealthResponse {
        status: "ok".into(),
        version: VERSION.into(),
        model: state.client.model_id().to_string(),
        index: IndexSummary {
            entities: stats.entities,
            items: stats.items,
            conversations: stats.conversations,
            edges: stats.edges,
        },
    })
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionResponse>, ApiError> {
    let handle = existing_session(&state, &id)?;
    let session = handle.lock().await;
    let kg = &state.engine.index().kg;
    Ok(Json(SessionResponse {
        session_id: session.id.clone(),
        turns: session.turns.iter().map(turn_body).collect(),
        entities: session
            .entities
            .iter()
            .map(|&e| entity_ref(state.engine.index(), e, Provenance::Mentioned, None))
            .collect(),
        recommended: session.recommended.iter().map(|&i| kg.entity(i).key.clone()).collect(),
    }))
}

fn turn_body(t: &Turn) -> TurnBody {
    TurnBody {
        speaker: t.speaker.label().to_lowercase(),
        text: t.text.clone(),
    }
}

fn entity_ref(index: &Index, e: EntityId, provenance: Provenance, score: Option<f64>) -> EntityRef {
    let entity = index.kg.entity(e);
    EntityRef {
        id: entity.key.clone(),
        name: entity.name.clone(),
        provenance: match provenance {
            Provenance::Mentioned => "mentioned",
            Provenance::Expanded => "expanded",
        }
        .into(),
        score,
    }
}

fn candidate_entries(index: &Index, retrieval: &Retrieval) -> Vec<RankedEntry> {
    retrieval
        .items
        .iter()
        .map(|i| RankedEntry {
            item_id: index.kg.entity(i.item).key.clone(),
            title: index.kg.entity(i.item).name.clone(),
            score: i.score,
        })
        .collect()
}

fn method_name(m: RetrievalMethod) -> &'static str {
    match m {
        RetrievalMethod::Graph => "graph",
        RetrievalMethod::ReasonerOnly => "reasoner-only",
        RetrievalMethod::Lexical => "lexical",
        RetrievalMethod::Popularity => "popularity",
    }
}

fn evidence(index: &Index, retrieval: &Retrieval) -> Evidence {
    let seed_entities = retrieval
        .seeds
        .seeds()
        .iter()
        .map(|s| entity_ref(index, s.entity, s.provenance, s.score))
        .collect();
    let expanded_entities = retrieval
        .expanded
        .iter()
        .map(|s| entity_ref(index, s.entity, Provenance::Expanded, Some(s.score)))
        .collect();
    let example_conversations: Vec<ExampleConversation> = retrieval
        .conversations
        .iter()
        .map(|c| {
            let conv = index.conversation(c.conversation);
            let mut accepted: Vec<String> = Vec::new();
            for item in conv.accepted_items() {
                let key = index.kg.entity(item).key.clone();
                if !accepted.contains(&key) {
                    accepted.push(key);
                }
            }
            ExampleConversation {
                id: conv.key.clone(),
                score: c.score,
                turns: conv.turns.iter().map(turn_body).collect(),
                accepted_items: accepted,
            }
        })
        .collect();
    Evidence {
        seed_entities,
        expanded_entities,
        example_conversation_ids: example_conversations.iter().map(|c| c.id.clone()).collect(),
        example_conversations,
        candidates: candidate_entries(index, retrieval),
        retrieval_method: method_name(retrieval.method).into(),
    }
}

fn recommend_body(index: &Index, session_id: &str, rec: &Recommendation) -> RecommendResponse {
    let score_of = |item: EntityId| {
        rec.retrieval
            .items
            .iter()
            .find(|i| i.item == item)
            .map_or(0.0, |i| i.score)
    };
    RecommendResponse {
        session_id: session_id.to_string(),
        ranked: rec
            .result
            .ranked_items
            .iter()
            .map(|&i| RankedEntry {
                item_id: index.kg.entity(i).key.clone(),
                title: index.kg.entity(i).name.clone(),
                score: score_of(i),
            })
            .collect(),
        reasoning: rec.result.reasoning.clone(),
        evidence: evidence(index, &rec.retrieval),
        degraded: rec.llm_error.is_some(),
        fallback: rec.result.fallback,
        error: rec.llm_error.clone(),
    }
}

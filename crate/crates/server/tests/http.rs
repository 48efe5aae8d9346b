use std::path::{Path, PathBuf};
use std::sync::Arc;

use convograph::config::EngineConfig;
use convograph::corpus::{load_corpus, CorpusOptions};
use convograph::index::{build_index, Index, IndexConfig};
use convograph::kg::{load_kg, KgOptions};
use convograph::llm::mock::{MockBehavior, MockChatClient};
use convograph::llm::{ChatClient, CountingClient};
use convograph::pipeline::Engine;
use convograph_server::api::*;
use convograph_server::AppState;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

const CASE_STUDY: &str = "Good morning! I'm in the mood for a movie with Mel Gibson. Any suggestions";

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/gibson")
        .join(name)
}

fn gibson() -> Arc<Index> {
    static INDEX: std::sync::LazyLock<Arc<Index>> = std::sync::LazyLock::new(|| {
        let kg = load_kg(fixture("kg.tsv"), KgOptions::default()).unwrap();
        let corpus = load_corpus(fixture("corpus.jsonl"), &kg, CorpusOptions { strict: true }).unwrap();
        Arc::new(build_index(kg, corpus, IndexConfig::default()).unwrap())
    });
    INDEX.clone()
}

struct Running {
    base: String,
    http: reqwest::Client,
    state: AppState,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<Result<(), convograph_server::ServerError>>,
}

impl Running {
    async fn start(client: Arc<dyn ChatClient>, config: EngineConfig) -> Self {
        let engine = Arc::new(Engine::new(gibson(), config).unwrap());
        let state = AppState::new(engine, client).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(convograph_server::serve(listener, state.clone(), async {
            let _ = rx.await;
        }));
        Self {
            base,
            http: reqwest::Client::new(),
            state,
            stop: Some(tx),
            task,
        }
    }

    async fn mock(behavior: MockBehavior) -> Self {
        Self::start(Arc::new(MockChatClient::new(behavior)), EngineConfig::default()).await
    }

    async fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap())
    }

    async fn post_raw(&self, path: &str, body: &'static str, content_type: &str) -> (u16, Value) {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", content_type)
            .body(body)
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap())
    }

    async fn shutdown(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.task.await.unwrap().unwrap();
    }
}

/// Parses into the strict wire type and checks nothing was lost or added.
fn schema<T: DeserializeOwned + Serialize>(body: &Value) -> T {
    let parsed: T = serde_json::from_value(body.clone()).unwrap_or_else(|e| panic!("{e}: {body}"));
    assert_eq!(&serde_json::to_value(&parsed).unwrap(), body);
    parsed
}

fn entity_ids(refs: &[EntityRef]) -> Vec<&str> {
    refs.iter().map(|e| e.id.as_str()).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn health_reports_index_and_model() {
    let srv = Running::mock(MockBehavior::Identity).await;
    let (status, body) = srv.get("/v1/health").await;
    assert_eq!(status, 200);
    let health: HealthResponse = schema(&body);
    assert_eq!(health.status, "ok");
    assert_eq!(health.model, "mock");
    let stats = gibson().stats();
    assert_eq!(health.index.items, 20);
    assert_eq!(health.index.conversations, stats.conversations);
    assert_eq!(health.index.edges, stats.edges);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn case_study_over_http() {
    let srv = Running::mock(MockBehavior::Identity).await;
    let (status, body) = srv.post("/v1/recommend", &json!({ "message": CASE_STUDY })).await;
    assert_eq!(status, 200, "{body}");
    let rec: RecommendResponse = schema(&body);
    assert!(!rec.degraded && !rec.fallback && rec.error.is_none());
    assert_eq!(rec.evidence.retrieval_method, "graph");
    assert_eq!(rec.evidence.seed_entities[0].id, "mel_gibson");
    assert_eq!(rec.evidence.seed_entities[0].provenance, "mentioned");
    assert_eq!(rec.ranked[0].title, "Braveheart (1995)");
    assert_eq!(rec.ranked, rec.evidence.candidates);
    assert_eq!(rec.evidence.example_conversation_ids.len(), 3);
    let candidate_ids: Vec<&str> = rec.evidence.candidates.iter().map(|c| c.item_id.as_str()).collect();
    assert!(rec.ranked.iter().all(|r| candidate_ids.contains(&r.item_id.as_str())));

    let (status, body) = srv.get(&format!("/v1/session/{}", rec.session_id)).await;
    assert_eq!(status, 200);
    let session: SessionResponse = schema(&body);
    assert_eq!(
        session.turns,
        vec![TurnBody {
            speaker: "user".into(),
            text: CASE_STUDY.into()
        }]
    );
    assert_eq!(entity_ids(&session.entities), vec!["mel_gibson"]);
    let shown: Vec<String> = rec.ranked.iter().take(5).map(|r| r.item_id.clone()).collect();
    assert_eq!(session.recommended, shown);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn follow_up_turn_accumulates_entities_and_excludes_shown_items() {
    let srv = Running::mock(MockBehavior::Identity).await;
    let (_, body) = srv.post("/v1/recommend", &json!({ "message": CASE_STUDY })).await;
    let first: RecommendResponse = schema(&body);
    let sid = first.session_id.clone();

    let (status, body) = srv
        .post(
            "/v1/recommend",
            &json!({ "session_id": sid, "message": "Something by George Miller would be fun too." }),
        )
        .await;
    assert_eq!(status, 200, "{body}");
    let second: RecommendResponse = schema(&body);
    assert_eq!(second.session_id, sid);
    let mentioned: Vec<&str> = second
        .evidence
        .seed_entities
        .iter()
        .filter(|e| e.provenance == "mentioned")
        .map(|e| e.id.as_str())
        .collect();
    assert!(mentioned.contains(&"mel_gibson") && mentioned.contains(&"george_miller"));
    for shown in first.ranked.iter().take(5) {
        assert!(
            second.ranked.iter().all(|r| r.item_id != shown.item_id),
            "{} repeated",
            shown.title
        );
    }

    let (_, body) = srv.get(&format!("/v1/session/{sid}")).await;
    let session: SessionResponse = schema(&body);
    assert_eq!(session.turns.len(), 2);
    assert_eq!(entity_ids(&session.entities), vec!["mel_gibson", "george_miller"]);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bad_requests_and_unknown_sessions() {
    let srv = Running::mock(MockBehavior::Identity).await;
    let cases = [
        json!({}),
        json!({ "message": "" }),
        json!({ "message": "   " }),
        json!({ "message": "hi", "k": 0 }),
        json!({ "message": "hi", "k": -3 }),
        json!({ "message": "hi", "colour": "blue" }),
        json!({ "message": 12 }),
    ];
    for path in ["/v1/recommend", "/v1/retrieve"] {
        for body in &cases {
            let (status, resp) = srv.post(path, body).await;
            assert_eq!(status, 400, "{path} {body}");
            let err: ErrorBody = schema(&resp);
            assert_eq!(err.error.code, "bad_request");
        }
        let (status, _) = srv.post_raw(path, "{not json", "application/json").await;
        assert_eq!(status, 400);
        let (status, _) = srv.post_raw(path, r#"{"message":"hi"}"#, "text/plain").await;
        assert_eq!(status, 400);

        let (status, resp) = srv.post(path, &json!({ "session_id": "nope", "message": "hi" })).await;
        assert_eq!(status, 404);
        assert_eq!(schema::<ErrorBody>(&resp).error.code, "unknown_session");
    }
    let (status, resp) = srv.get("/v1/session/nope").await;
    assert_eq!(status, 404);
    assert_eq!(schema::<ErrorBody>(&resp).error.code, "unknown_session");
    assert!(srv.state.sessions().is_empty());
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unreachable_model_answers_503_with_retrieval_order() {
    let srv = Running::mock(MockBehavior::Unavailable).await;
    let (status, body) = srv.post("/v1/recommend", &json!({ "message": CASE_STUDY })).await;
    assert_eq!(status, 503);
    let rec: RecommendResponse = schema(&body);
    assert!(rec.degraded);
    assert!(rec.error.is_some());
    assert_eq!(rec.ranked, rec.evidence.candidates);
    assert_eq!(rec.ranked[0].title, "Braveheart (1995)");
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn sixteen_concurrent_recommendations() {
    let srv = Arc::new(Running::mock(MockBehavior::Reverse).await);
    let messages = [
        CASE_STUDY,
        "Film noir with Humphrey Bogart please",
        "Any westerns with John Wayne?",
        "I liked Mad Max, what next?",
    ];
    let mut tasks = Vec::new();
    for i in 0..16 {
        let srv = srv.clone();
        let message = messages[i % messages.len()];
        tasks.push(tokio::spawn(async move {
            let (status, body) = srv.post("/v1/recommend", &json!({ "message": message, "k": 10 })).await;
            (i, status, body)
        }));
    }
    let mut by_message: Vec<Option<Vec<RankedEntry>>> = vec![None; messages.len()];
    let mut sessions = Vec::new();
    for t in tasks {
        let (i, status, body) = t.await.unwrap();
        assert_eq!(status, 200, "{body}");
        let rec: RecommendResponse = schema(&body);
        assert!(!rec.degraded);
        assert!(rec.ranked.len() <= 10);
        let candidate_ids: Vec<&str> = rec.evidence.candidates.iter().map(|c| c.item_id.as_str()).collect();
        assert!(rec.ranked.iter().all(|r| candidate_ids.contains(&r.item_id.as_str())));
        match &by_message[i % messages.len()] {
            Some(prev) => assert_eq!(prev, &rec.ranked),
            None => by_message[i % messages.len()] = Some(rec.ranked.clone()),
        }
        sessions.push(rec.session_id);
    }
    sessions.sort();
    sessions.dedup();
    assert_eq!(sessions.len(), 16);
    assert_eq!(srv.state.sessions().len(), 16);
    Arc::into_inner(srv).unwrap().shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn interleaved_sessions_stay_isolated() {
    let srv = Arc::new(Running::mock(MockBehavior::Identity).await);
    let (_, a) = srv.post("/v1/recommend", &json!({ "message": CASE_STUDY })).await;
    let (_, b) = srv
        .post(
            "/v1/recommend",
            &json!({ "message": "Film noir with Humphrey Bogart please" }),
        )
        .await;
    let a = schema::<RecommendResponse>(&a).session_id;
    let b = schema::<RecommendResponse>(&b).session_id;

    let mut tasks = Vec::new();
    for round in 0..4 {
        for (sid, msg) in [(&a, "More with Danny Glover?"), (&b, "Something like The Big Sleep")] {
            let srv = srv.clone();
            let body = json!({ "session_id": sid, "message": format!("{msg} ({round})") });
            tasks.push(tokio::spawn(async move { srv.post("/v1/recommend", &body).await }));
        }
    }
    for t in tasks {
        let (status, body) = t.await.unwrap();
        assert_eq!(status, 200, "{body}");
    }

    let (_, body) = srv.get(&format!("/v1/session/{a}")).await;
    let sa: SessionResponse = schema(&body);
    let (_, body) = srv.get(&format!("/v1/session/{b}")).await;
    let sb: SessionResponse = schema(&body);
    assert_eq!(sa.turns.len(), 5);
    assert_eq!(sb.turns.len(), 5);
    assert!(sa.turns[1..]
        .iter()
        .all(|t| t.text.starts_with("More with Danny Glover")));
    assert!(sb.turns[1..]
        .iter()
        .all(|t| t.text.starts_with("Something like The Big Sleep")));
    let ea = entity_ids(&sa.entities);
    let eb = entity_ids(&sb.entities);
    assert!(ea.contains(&"mel_gibson") && ea.contains(&"danny_glover"));
    assert!(eb.contains(&"humphrey_bogart"));
    assert!(!ea.contains(&"humphrey_bogart") && !eb.contains(&"mel_gibson"));
    Arc::into_inner(srv).unwrap().shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn retrieve_never_calls_the_model_or_changes_the_session() {
    let counting = Arc::new(CountingClient::new(MockChatClient::new(MockBehavior::Identity)));
    let srv = Running::start(counting.clone(), EngineConfig::default()).await;

    let (status, body) = srv
        .post("/v1/retrieve", &json!({ "message": CASE_STUDY, "k": 5, "n": 2 }))
        .await;
    assert_eq!(status, 200, "{body}");
    let r: RetrieveResponse = schema(&body);
    assert_eq!(r.candidates.len(), 5);
    assert_eq!(r.candidates[0].title, "Braveheart (1995)");
    assert_eq!(r.evidence.example_conversation_ids.len(), 2);
    assert_eq!(counting.calls(), 0);
    assert!(srv.state.sessions().is_empty());

    let (_, body) = srv.post("/v1/recommend", &json!({ "message": CASE_STUDY })).await;
    let rec: RecommendResponse = schema(&body);
    assert_eq!(counting.calls(), 1);
    for _ in 0..5 {
        let (status, _) = srv
            .post(
                "/v1/retrieve",
                &json!({ "session_id": rec.session_id, "message": "and with George Miller?" }),
            )
            .await;
        assert_eq!(status, 200);
    }
    assert_eq!(counting.calls(), 1);
    let (_, body) = srv.get(&format!("/v1/session/{}", rec.session_id)).await;
    assert_eq!(schema::<SessionResponse>(&body).turns.len(), 1);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = EngineConfig::default();
    config.server.snapshot_path = Some(dir.path().join("sessions.json"));
    let client: Arc<dyn ChatClient> = Arc::new(MockChatClient::new(MockBehavior::Identity));

    let srv = Running::start(client.clone(), config.clone()).await;
    let (_, body) = srv.post("/v1/recommend", &json!({ "message": CASE_STUDY })).await;
    let sid = schema::<RecommendResponse>(&body).session_id;
    let (_, before) = srv.get(&format!("/v1/session/{sid}")).await;
    srv.shutdown().await;
    assert!(dir.path().join("sessions.json").exists());

    let srv = Running::start(client, config).await;
    let (status, after) = srv.get(&format!("/v1/session/{sid}")).await;
    assert_eq!(status, 200);
    assert_eq!(before, after);
    srv.shutdown().await;
}

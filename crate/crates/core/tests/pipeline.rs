mod common;

use std::sync::Arc;

use convograph::config::{Ablation, EngineConfig};
use convograph::corpus::{split_eval_instances, History, Turn};
use convograph::eval::{run_experiment, RunOptions};
use convograph::llm::cache::{CachedClient, ResponseCache};
use convograph::llm::mock::{format_reply, MockBehavior, MockChatClient};
use convograph::llm::CountingClient;
use convograph::pipeline::{Engine, Query, RetrievalMethod};
use convograph::rerank::is_grounded;
use convograph::Error;

const CASE_STUDY: &str = "Good morning! I'm in the mood for a movie with Mel Gibson. Any suggestions";

fn case_query() -> Query {
    Query::new(History::from_turns(vec![Turn::user(CASE_STUDY)]))
}

#[test]
fn case_study_retrieves_the_filmography() {
    let index = common::gibson();
    let engine = Engine::new(index.clone(), EngineConfig::default()).unwrap();
    let gibson = index.kg.by_key("mel_gibson").unwrap();
    let r = engine.retrieve(&case_query()).unwrap();
    assert_eq!(r.mentioned, vec![gibson]);
    assert!(r.seeds.contains(gibson));
    assert_eq!(r.method, RetrievalMethod::Graph);
    assert_eq!(r.conversations.len(), 3);
    let linked: Vec<_> = index.kg.adjacency().row(gibson.index()).map(|(j, _, _)| j).collect();
    let top = &r.items[0];
    assert_eq!(index.kg.entity(top.item).name, "Braveheart (1995)");
    assert!(r.items.iter().take(3).all(|i| linked.contains(&i.item.index())));

    let rec = engine
        .recommend(&case_query(), &MockChatClient::new(MockBehavior::Identity))
        .unwrap();
    assert_eq!(rec.result.ranked_items, r.item_ids());
    assert!(rec.llm_error.is_none());
}

#[test]
fn case_study_prompt_matches_golden_file() {
    let index = common::gibson();
    let engine = Engine::new(index, EngineConfig::default()).unwrap();
    let rec = engine
        .recommend(&case_query(), &MockChatClient::new(MockBehavior::Identity))
        .unwrap();
    let prompt = rec.prompt.unwrap();
    let rendered = format!("[system]\n{}\n[user]\n{}", prompt.instructions, prompt.user_message());
    let path = common::fixture_path("gibson/prompt.golden.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &rendered).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("golden file present");
    assert_eq!(rendered, golden);
}

#[test]
fn pipeline_output_is_deterministic() {
    let fx = common::shared();
    let engine = common::engine(fx, Ablation::None);
    let client = MockChatClient::new(MockBehavior::Hallucinate);
    let q = Query::new(fx.instances[0].history.clone());
    let a = engine.recommend(&q, &client).unwrap();
    let b = engine.recommend(&q, &client).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identity_rerank_reproduces_retrieval_metrics() {
    let fx = common::shared();
    let client = MockChatClient::new(MockBehavior::Identity);
    for ablation in [Ablation::None, Ablation::NoIcl] {
        let engine = common::engine(fx, ablation);
        let report = run_experiment(&engine, &fx.instances, &client, &RunOptions::default()).unwrap();
        assert_eq!(report.end_to_end, report.retrieval, "{ablation:?}");
        assert!(report.records.iter().all(|r| r.final_rank == r.retrieval_rank));
        assert_eq!(report.grounding_violations, 0);
        assert_eq!(report.fallbacks, 0);
    }
}

#[test]
fn adversarial_replies_stay_grounded() {
    let fx = common::shared();
    let engine = common::engine(fx, Ablation::None);
    let behaviors = [
        MockBehavior::Reverse,
        MockBehavior::Prose,
        MockBehavior::Hallucinate,
        MockBehavior::Script(Arc::new(|titles: &[String]| {
            let mut out: Vec<String> = titles.iter().rev().take(5).map(|t| t.to_uppercase()).collect();
            out.push("Casablanca (1942)".into());
            out.push(titles.first().cloned().unwrap_or_default());
            format_reply(&out, "mixed")
        })),
    ];
    for behavior in behaviors {
        let client = MockChatClient::new(behavior.clone());
        for instance in fx.instances.iter().take(20) {
            let q = Query::new(instance.history.clone());
            let rec = engine.recommend(&q, &client).unwrap();
            let candidates = rec.retrieval.item_ids();
            assert!(is_grounded(&rec.result.ranked_items, &candidates), "{behavior:?}");
            let mut sorted = rec.result.ranked_items.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), rec.result.ranked_items.len());
        }
    }
}

#[test]
fn unreachable_model_falls_back_to_retrieval_order() {
    let fx = common::shared();
    let engine = common::engine(fx, Ablation::None);
    let q = Query::new(fx.instances[0].history.clone());
    let rec = engine
        .recommend(&q, &MockChatClient::new(MockBehavior::Unavailable))
        .unwrap();
    assert!(rec.llm_error.is_some());
    assert_eq!(rec.result.ranked_items, rec.retrieval.item_ids());

    let err = run_experiment(
        &engine,
        &fx.instances[..3],
        &MockChatClient::new(MockBehavior::Unavailable),
        &RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Llm(_)), "{err}");
}

#[test]
fn unlinkable_history_uses_popularity() {
    let fx = common::shared();
    let engine = common::engine(fx, Ablation::None);
    let q = Query::new(History::from_turns(vec![Turn::user("hello there, surprise me")]));
    let r = engine.retrieve(&q).unwrap();
    assert_eq!(r.method, RetrievalMethod::Popularity);
    assert_eq!(r.items.len(), 100);
    assert!(r.conversations.is_empty());
    let pop = fx.index.popularity();
    assert!(r
        .items
        .windows(2)
        .all(|w| pop[w[0].item.index()] >= pop[w[1].item.index()]));
}

#[test]
fn exclusions_and_k_are_honoured() {
    let fx = common::shared();
    let engine = common::engine(fx, Ablation::None);
    let mut q = Query::new(fx.instances[1].history.clone());
    let first = engine.retrieve(&q).unwrap();
    q.exclude_items = first.item_ids()[..3].to_vec();
    q.k = Some(5);
    let second = engine.retrieve(&q).unwrap();
    assert_eq!(second.items.len(), 5);
    assert_eq!(second.item_ids(), first.item_ids()[3..8].to_vec());
}

#[test]
fn warm_cache_makes_no_model_calls() {
    let fx = common::shared();
    let engine = common::engine(fx, Ablation::None);
    let dir = tempfile::tempdir().unwrap();
    let instances = &fx.instances[..25];

    let cold = CachedClient::new(
        CountingClient::new(MockChatClient::new(MockBehavior::Reverse)),
        ResponseCache::open(dir.path()).unwrap(),
    );
    let first = run_experiment(&engine, instances, &cold, &RunOptions::default()).unwrap();
    // Instances with identical prompts may share one entry.
    assert!(cold.inner().calls() > 0 && cold.inner().calls() <= instances.len());

    let warm = CachedClient::new(
        CountingClient::new(MockChatClient::new(MockBehavior::Unavailable)),
        ResponseCache::open(dir.path()).unwrap(),
    );
    let second = run_experiment(&engine, instances, &warm, &RunOptions::default()).unwrap();
    assert_eq!(warm.inner().calls(), 0);
    assert_eq!(first.records, second.records);
}

#[test]
fn checkpoint_resumes_and_rejects_other_configs() {
    let fx = common::shared();
    let engine = common::engine(fx, Ablation::None);
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions {
        checkpoint: Some(dir.path().join("run.jsonl")),
        retrieval_only: false,
    };
    let instances = &fx.instances[..10];
    let first = run_experiment(
        &engine,
        instances,
        &MockChatClient::new(MockBehavior::Identity),
        &options,
    )
    .unwrap();
    let counting = CountingClient::new(MockChatClient::new(MockBehavior::Identity));
    let resumed = run_experiment(&engine, instances, &counting, &options).unwrap();
    assert_eq!(counting.calls(), 0);
    assert_eq!(first.to_json(), resumed.to_json());

    let other = common::engine(fx, Ablation::NoIcl);
    let err = run_experiment(&other, instances, &counting, &options).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn retrieving_a_test_conversation_is_reported_as_leakage() {
    let fx = common::shared();
    let engine = common::engine(fx, Ablation::None);
    let leaked = split_eval_instances(&fx.index.corpus);
    let err = run_experiment(
        &engine,
        &leaked[..5],
        &MockChatClient::new(MockBehavior::Identity),
        &RunOptions {
            retrieval_only: true,
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Validation(ref m) if m.contains("leakage")),
        "{err}"
    );
}

#[test]
fn metric_report_is_reproducible_json() {
    let fx = common::shared();
    let engine = common::engine(fx, Ablation::NoPpr);
    let client = MockChatClient::new(MockBehavior::Identity);
    let opts = RunOptions {
        retrieval_only: true,
        ..Default::default()
    };
    let a = run_experiment(&engine, &fx.instances, &client, &opts).unwrap();
    let b = run_experiment(&engine, &fx.instances, &client, &opts).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    a.check_invariants().unwrap();
    assert_eq!(a.fingerprint, engine.config().fingerprint());
}

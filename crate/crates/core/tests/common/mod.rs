#![allow(dead_code)]

use std::sync::Arc;

use convograph::config::{Ablation, EngineConfig};
use convograph::corpus::{parse_corpus, split_eval_instances, Conversation, CorpusOptions, EvalInstance};
use convograph::index::{build_index, Index, IndexConfig};
use convograph::kg::{KgOptions, KnowledgeGraph};
use convograph::pipeline::Engine;
use convograph::synth::{generate, SynthConfig, SynthData};

pub struct Fixture {
    pub data: SynthData,
    pub index: Arc<Index>,
    pub test: Vec<Conversation>,
    pub instances: Vec<EvalInstance>,
}

pub fn synthetic() -> Fixture {
    let data = generate(&SynthConfig::default());
    let kg = KnowledgeGraph::parse(&data.kg, "kg.tsv", KgOptions::default()).unwrap();
    let strict = CorpusOptions { strict: true };
    let train = parse_corpus(&data.train, "train.jsonl", &kg, strict).unwrap();
    let test = parse_corpus(&data.test, "test.jsonl", &kg, strict).unwrap();
    let instances = split_eval_instances(&test);
    let index = Arc::new(build_index(kg, train, IndexConfig::default()).unwrap());
    Fixture {
        data,
        index,
        test,
        instances,
    }
}

pub fn engine(fx: &Fixture, ablation: Ablation) -> Engine {
    Engine::new(fx.index.clone(), EngineConfig::default().with_ablation(ablation)).unwrap()
}

static SHARED: std::sync::LazyLock<Fixture> = std::sync::LazyLock::new(synthetic);

/// One fixture per test binary.
pub fn shared() -> &'static Fixture {
    &SHARED
}

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Index over the hand-written filmography fixture.
pub fn gibson() -> Arc<Index> {
    let kg = convograph::kg::load_kg(fixture_path("gibson/kg.tsv"), KgOptions::default()).unwrap();
    let corpus =
        convograph::corpus::load_corpus(fixture_path("gibson/corpus.jsonl"), &kg, CorpusOptions { strict: true })
            .unwrap();
    Arc::new(build_index(kg, corpus, IndexConfig::default()).unwrap())
}

//! Online query path: entity extraction, expansion, graph retrieval, prompt
//! construction and reranking.

use std::sync::{Arc, OnceLock};

use serde::Serialize;

use crate::bm25::{lexical_baseline_retrieve, Bm25Index};
use crate::config::{Ablation, EngineConfig, ReasonerKind};
use crate::corpus::{ConversationId, History};
use crate::error::{Error, Result};
use crate::index::Index;
use crate::kg::{EntityId, ItemId};
use crate::linker::{extract_history_entities, DictionaryExtractor, EntityExtractor, ExtractorKind, LlmExtractor};
use crate::llm::ChatClient;
use crate::ppr::{self, make_personalization, top_indices, RankedConversation, RankedItem};
use crate::reasoner::{make_seed_set, EmbeddingReasoner, EntityReasoner, ScoredEntity, SeedSet, StatisticalReasoner};
use crate::rerank::{build_prompt, rerank, PromptBundle, RecommendationResult};

#[derive(Debug, Clone, Default)]
pub struct Query {
    pub history: History,
    /// Items never returned (e.g. already recommended).
    pub exclude_items: Vec<ItemId>,
    /// Conversation never returned as an example.
    pub exclude_conversation: Option<ConversationId>,
    /// Overrides `top_k_items`.
    pub k: Option<usize>,
    /// Overrides `top_n_conversations`.
    pub n: Option<usize>,
}

impl Query {
    pub fn new(history: History) -> Self {
        Self {
            history,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMethod {
    Graph,
    ReasonerOnly,
    Lexical,
    /// No seeds could be formed; items ranked by corpus popularity.
    Popularity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PprSummary {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieval {
    pub mentioned: Vec<EntityId>,
    pub expanded: Vec<ScoredEntity>,
    pub seeds: SeedSet,
    pub items: Vec<RankedItem>,
    pub conversations: Vec<RankedConversation>,
    pub method: RetrievalMethod,
    pub ppr: Option<PprSummary>,
}

impl Retrieval {
    pub fn item_ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|i| i.item).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub retrieval: Retrieval,
    pub prompt: Option<PromptBundle>,
    pub result: RecommendationResult,
    /// Set when the model could not be reached; `result` then holds the
    /// retrieval order.
    pub llm_error: Option<String>,
}

pub struct Engine {
    index: Arc<Index>,
    config: EngineConfig,
    reasoner: Arc<dyn EntityReasoner>,
    extractor: Arc<dyn EntityExtractor>,
    bm25: OnceLock<Bm25Index>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("ablation", &self.config.ablation)
            .field("reasoner", &self.reasoner.name())
            .finish()
    }
}

impl Engine {
    /// Engine with the configured reasoner and the dictionary extractor.
    pub fn new(index: Arc<Index>, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let reasoner: Arc<dyn EntityReasoner> = match config.reasoner.kind {
            ReasonerKind::Statistical => Arc::new(StatisticalReasoner::new(config.reasoner.weights)),
            ReasonerKind::Embedding => {
                let path = config.reasoner.embedding_path.as_ref().expect("validated");
                Arc::new(EmbeddingReasoner::load(path, &index.kg)?)
            }
        };
        let extractor: Arc<dyn EntityExtractor> = Arc::new(DictionaryExtractor::new(
            index.linker().clone(),
            config.linker.link_threshold,
        ));
        Ok(Self {
            index,
            config,
            reasoner,
            extractor,
            bm25: OnceLock::new(),
        })
    }

    /// Uses the LLM extractor when the config asks for it.
    pub fn with_llm_extractor(mut self, client: Arc<dyn ChatClient>) -> Self {
        if self.config.linker.extractor == ExtractorKind::Llm {
            self.extractor = Arc::new(LlmExtractor::new(
                client,
                self.index.linker().clone(),
                self.config.linker.link_threshold,
            ));
        }
        self
    }

    pub fn with_reasoner(mut self, reasoner: Arc<dyn EntityReasoner>) -> Self {
        self.reasoner = reasoner;
        self
    }

    pub fn index(&self) -> &Arc<Index> {
        &self.index
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn extractor(&self) -> &dyn EntityExtractor {
        self.extractor.as_ref()
    }

    fn bm25(&self) -> &Bm25Index {
        self.bm25
            .get_or_init(|| Bm25Index::from_corpus(&self.index.corpus, self.config.bm25))
    }

    /// Candidate items and example conversations for a query. Makes no LLM
    /// calls unless the LLM extractor is configured.
    pub fn retrieve(&self, query: &Query) -> Result<Retrieval> {
        let k = query.k.unwrap_or(self.config.retrieval.top_k_items);
        let n = query.n.unwrap_or_else(|| self.config.effective_top_n());
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        let index = &self.index;
        let mentioned = extract_history_entities(&query.history, self.extractor.as_ref());

        if self.config.ablation == Ablation::Bm25 {
            let lex = lexical_baseline_retrieve(&query.history, self.bm25(), &index.corpus, k, n, &query.exclude_items);
            let conversations = lex
                .conversations
                .into_iter()
                .filter(|c| Some(c.conversation) != query.exclude_conversation)
                .collect();
            return Ok(Retrieval {
                seeds: make_seed_set(&mentioned, &[]),
                mentioned,
                expanded: Vec::new(),
                items: lex.items,
                conversations,
                method: RetrievalMethod::Lexical,
                ppr: None,
            });
        }

        let budget = self.config.effective_reasoner_budget();
        let expanded = self.reasoner.expand(&mentioned, index, budget);
        let seeds = make_seed_set(&mentioned, &expanded);
        if seeds.is_empty() {
            tracing::warn!("no entities linked in history; using popularity fallback");
            return Ok(Retrieval {
                mentioned,
                expanded,
                seeds,
                items: self.popular_items(k, &query.exclude_items),
                conversations: Vec::new(),
                method: RetrievalMethod::Popularity,
                ppr: None,
            });
        }

        if self.config.ablation == Ablation::NoPpr {
            return Ok(self.reasoner_only(query, mentioned, expanded, seeds, k, n));
        }

        let graph = &index.graph;
        let p = make_personalization(&seeds.entities(), graph.node_count())?;
        let scores = ppr::ppr(graph.adjacency(), &p, &self.config.retrieval.ppr)?;
        let items = ppr::top_k_items(&scores.r, graph.item_count(), k, &query.exclude_items);
        let conversations = ppr::top_n_conversations(
            &scores.r[..graph.entity_count()],
            &index.frequency,
            n,
            query.exclude_conversation,
        );
        Ok(Retrieval {
            mentioned,
            expanded,
            seeds,
            items,
            conversations,
            method: RetrievalMethod::Graph,
            ppr: Some(PprSummary {
                iterations: scores.iterations,
                residual: scores.residual,
                converged: scores.converged,
            }),
        })
    }

    fn reasoner_only(
        &self,
        query: &Query,
        mentioned: Vec<EntityId>,
        expanded: Vec<ScoredEntity>,
        seeds: SeedSet,
        k: usize,
        n: usize,
    ) -> Retrieval {
        let index = &self.index;
        let all = self.reasoner.expand(&mentioned, index, index.kg.entity_count());
        let items: Vec<RankedItem> = all
            .iter()
            .filter(|s| index.kg.is_item(s.entity) && !query.exclude_items.contains(&s.entity))
            .take(k)
            .map(|s| RankedItem {
                item: s.entity,
                score: s.score,
                zero: false,
            })
            .collect();
        let mut indicator = vec![0.0; index.kg.entity_count()];
        for e in seeds.entities() {
            indicator[e.index()] = 1.0;
        }
        let conversations = ppr::top_n_conversations(&indicator, &index.frequency, n, query.exclude_conversation);
        Retrieval {
            mentioned,
            expanded,
            seeds,
            items,
            conversations,
            method: RetrievalMethod::ReasonerOnly,
            ppr: None,
        }
    }

    /// Items by accepted-recommendation count in the training corpus.
    pub fn popular_items(&self, k: usize, exclude: &[ItemId]) -> Vec<RankedItem> {
        let pop = self.index.popularity();
        top_indices(pop, k, |i| !exclude.contains(&EntityId(i as u32)))
            .into_iter()
            .map(|i| RankedItem {
                item: EntityId(i as u32),
                score: pop[i],
                zero: pop[i] <= 0.0,
            })
            .collect()
    }

    /// Full pipeline. LLM failures do not fail the call: the result keeps the
    /// retrieval order and `llm_error` records the failure.
    pub fn recommend(&self, query: &Query, client: &dyn ChatClient) -> Result<Recommendation> {
        let retrieval = self.retrieve(query)?;
        let candidates = retrieval.item_ids();
        if candidates.is_empty() {
            return Ok(Recommendation {
                result: RecommendationResult::retrieval_order(&[], String::new(), String::new()),
                retrieval,
                prompt: None,
                llm_error: None,
            });
        }
        let examples: Vec<&crate::corpus::Conversation> = retrieval
            .conversations
            .iter()
            .map(|c| self.index.conversation(c.conversation))
            .collect();
        let prompt = build_prompt(
            &query.history,
            &examples,
            &candidates,
            &self.index.kg,
            &self.config.prompt(),
        )?;
        match rerank(&prompt, client, self.index.linker(), &self.config.rerank()) {
            Ok(result) => Ok(Recommendation {
                retrieval,
                prompt: Some(prompt),
                result,
                llm_error: None,
            }),
            Err(Error::Llm(err)) => {
                tracing::warn!(%err, "llm unavailable; returning retrieval order");
                Ok(Recommendation {
                    result: RecommendationResult::retrieval_order(&candidates, String::new(), String::new()),
                    retrieval,
                    prompt: Some(prompt),
                    llm_error: Some(err.to_string()),
                })
            }
            Err(other) => Err(other),
        }
    }
}

//! Graph-retrieval conversational recommendation.
//!
//! Offline, a dialogue corpus and a knowledge graph are indexed into one
//! conversation-entity interaction graph. Online, entities linked in the
//! conversation (plus reasoner expansions) seed a personalized PageRank walk
//! that retrieves candidate items and similar past conversations; an LLM then
//! reranks the candidates using the conversations as in-context examples.

pub mod bm25;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod index;
pub mod kg;
pub mod linker;
pub mod llm;
pub mod pipeline;
pub mod ppr;
pub mod reasoner;
pub mod rerank;
pub mod sparse;
pub mod synth;
pub mod text;

pub use error::{Error, Result};

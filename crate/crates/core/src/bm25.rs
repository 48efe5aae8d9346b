//! Lexical baseline: BM25 over conversation text, with candidate items taken
//! from the accepted recommendations of the best-matching conversations.
//!
//! `idf(t) = ln((N − df + 0.5) / (df + 0.5) + 1)`; each distinct query term
//! contributes `idf · tf·(k1+1) / (tf + k1·(1 − b + b·len/avglen))`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, ConversationId, History};
use crate::kg::ItemId;
use crate::ppr::{top_indices, RankedConversation, RankedItem};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Config {
    pub k1: f64,
    pub b: f64,
    /// Number of top conversations whose recommendations form the item pool.
    pub pool: usize,
}

impl Default for Bm25Config {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            pool: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    config: Bm25Config,
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_len: Vec<u32>,
    avg_len: f64,
}

pub fn terms(text: &str) -> Vec<String> {
    text::tokenize(text).into_iter().map(|t| t.text).collect()
}

impl Bm25Index {
    pub fn build(documents: &[String], config: Bm25Config) -> Self {
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(documents.len());
        for (d, doc) in documents.iter().enumerate() {
            let toks = terms(doc);
            doc_len.push(toks.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((d as u32, n));
            }
        }
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avg_len = if documents.is_empty() {
            0.0
        } else {
            total as f64 / documents.len() as f64
        };
        Self {
            config,
            postings,
            doc_len,
            avg_len,
        }
    }

    pub fn from_corpus(corpus: &[Conversation], config: Bm25Config) -> Self {
        let docs: Vec<String> = corpus.iter().map(Conversation::full_text).collect();
        Self::build(&docs, config)
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    pub fn config(&self) -> Bm25Config {
        self.config
    }

    /// BM25 score of every document for `query`.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut q = terms(query);
        q.sort();
        q.dedup();
        let n = self.doc_len.len() as f64;
        let Bm25Config { k1, b, .. } = self.config;
        let mut scores = vec![0.0; self.doc_len.len()];
        for term in q {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - b + b * self.doc_len[d as usize] as f64 / self.avg_len;
                scores[d as usize] += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        scores
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LexicalResult {
    pub items: Vec<RankedItem>,
    pub conversations: Vec<RankedConversation>,
}

/// Ranks conversations by BM25 against the history text; items are the
/// accepted recommendations of the top `pool` conversations ranked by how
/// many of them recommend the item (ties: summed BM25 score, then lower id).
pub fn lexical_baseline_retrieve(
    history: &History,
    index: &Bm25Index,
    corpus: &[Conversation],
    k: usize,
    n: usize,
    exclusions: &[ItemId],
) -> LexicalResult {
    let scores = index.scores(&history.text());
    let ranked = top_indices(&scores, index.config.pool.max(n), |d| scores[d] > 0.0);
    let conversations = ranked
        .iter()
        .take(n)
        .map(|&d| RankedConversation {
            conversation: ConversationId(d as u32),
            score: scores[d],
        })
        .collect();
    let mut tally: BTreeMap<ItemId, (u32, f64)> = BTreeMap::new();
    for &d in ranked.iter().take(index.config.pool) {
        let mut items: Vec<ItemId> = corpus[d].accepted_items().collect();
        items.sort_unstable();
        items.dedup();
        for item in items {
            if exclusions.contains(&item) {
                continue;
            }
            let e = tally.entry(item).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += scores[d];
        }
    }
    let mut items: Vec<(ItemId, u32, f64)> = tally.into_iter().map(|(i, (c, s))| (i, c, s)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    items.truncate(k);
    LexicalResult {
        items: items
            .into_iter()
            .map(|(item, count, _)| RankedItem {
                item,
                score: count as f64,
                zero: false,
            })
            .collect(),
        conversations,
    }
}

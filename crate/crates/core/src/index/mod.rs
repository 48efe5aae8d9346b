//! Offline indexing: the entity-by-conversation frequency matrix and the
//! conversation-entity interaction graph.
//!
//! Node layout of the interaction graph: entity nodes occupy
//! `0..entity_count` (items first), conversation nodes follow at
//! `entity_count + conversation_id`.

mod io;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use io::{load_index, read_index_bytes, save_index, write_index_bytes, INDEX_MAGIC, INDEX_VERSION};

use crate::corpus::{Conversation, ConversationId, CorpusOptions};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KgOptions, KnowledgeGraph};
use crate::linker::{link_conversation, DictionaryExtractor, EntityExtractor, EntityLinker};
use crate::sparse::{CsrMatrix, SymmetricBuilder};

/// Bit flags recording which relationship produced an edge.
pub mod edge_kind {
    pub const MENTION: u8 = 1;
    pub const COOCCURRENCE: u8 = 2;
    pub const RECOMMENDATION: u8 = 4;
    pub const KG: u8 = 8;
    pub const ALL: u8 = MENTION | COOCCURRENCE | RECOMMENDATION | KG;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub w_mention: f64,
    pub w_cooc: f64,
    pub w_rec: f64,
    pub w_kg: f64,
    /// Per-pair cap on mention counts feeding mention-edge weights; `None`
    /// leaves counts uncapped.
    pub mention_cap: Option<u32>,
    /// Minimum number of shared conversations for a co-occurrence edge.
    pub min_cooc: u32,
    /// Create recommendation edges for rejected recommendations too.
    pub include_rejected: bool,
    /// Run the dictionary linker over turn text and merge with annotations.
    pub link_corpus_text: bool,
    pub link_threshold: f64,
    pub kg: KgOptions,
    pub corpus: CorpusOptions,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            w_mention: 1.0,
            w_cooc: 1.0,
            w_rec: 2.0,
            w_kg: 1.0,
            mention_cap: Some(3),
            min_cooc: 2,
            include_rejected: false,
            link_corpus_text: true,
            link_threshold: 0.90,
            kg: KgOptions::default(),
            corpus: CorpusOptions::default(),
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_mention, self.w_cooc, self.w_rec, self.w_kg];
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Config(
                "edge-type multipliers must be positive and finite".into(),
            ));
        }
        if !(self.link_threshold > 0.0 && self.link_threshold <= 1.0) {
            return Err(Error::Config("link_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Sparse `entities × conversations` mention-count matrix in compressed
/// sparse column form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyMatrix {
    rows: usize,
    colptr: Vec<usize>,
    row_idx: Vec<u32>,
    counts: Vec<u32>,
}

impl FrequencyMatrix {
    pub fn from_parts(rows: usize, colptr: Vec<usize>, row_idx: Vec<u32>, counts: Vec<u32>) -> Result<Self> {
        let bad = |m: &str| Err(Error::IndexFormat(format!("frequency matrix: {m}")));
        if colptr.first() != Some(&0) || colptr.last() != Some(&row_idx.len()) || counts.len() != row_idx.len() {
            return bad("column pointers do not span the entries");
        }
        for c in 0..colptr.len() - 1 {
            if colptr[c] > colptr[c + 1] {
                return bad("column pointers decrease");
            }
            let col = &row_idx[colptr[c]..colptr[c + 1]];
            if col.iter().any(|&r| r as usize >= rows) || col.windows(2).any(|w| w[0] >= w[1]) {
                return bad("row indices out of range or unsorted");
            }
        }
        if counts.contains(&0) {
            return bad("explicit zero entry");
        }
        Ok(Self {
            rows,
            colptr,
            row_idx,
            counts,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.colptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    pub fn row_indices(&self) -> &[u32] {
        &self.row_idx
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// `(entity, count)` pairs of one conversation, by entity id.
    pub fn column(&self, conversation: ConversationId) -> impl Iterator<Item = (EntityId, u32)> + '_ {
        let c = conversation.index();
        (self.colptr[c]..self.colptr[c + 1]).map(move |k| (EntityId(self.row_idx[k]), self.counts[k]))
    }

    pub fn get(&self, entity: EntityId, conversation: ConversationId) -> u32 {
        let c = conversation.index();
        let (lo, hi) = (self.colptr[c], self.colptr[c + 1]);
        match self.row_idx[lo..hi].binary_search(&entity.0) {
            Ok(k) => self.counts[lo + k],
            Err(_) => 0,
        }
    }

    /// Number of conversations mentioning each entity.
    pub fn document_frequency(&self) -> Vec<u32> {
        let mut df = vec![0u32; self.rows];
        for &r in &self.row_idx {
            df[r as usize] += 1;
        }
        df
    }

    /// Row view: for each entity, the conversations mentioning it, ascending.
    pub fn entity_rows(&self) -> (Vec<usize>, Vec<u32>) {
        let mut rowptr = vec![0usize; self.rows + 1];
        for &r in &self.row_idx {
            rowptr[r as usize + 1] += 1;
        }
        for i in 0..self.rows {
            rowptr[i + 1] += rowptr[i];
        }
        let mut next = rowptr.clone();
        let mut cols = vec![0u32; self.row_idx.len()];
        for c in 0..self.cols() {
            for k in self.colptr[c]..self.colptr[c + 1] {
                let r = self.row_idx[k] as usize;
                cols[next[r]] = c as u32;
                next[r] += 1;
            }
        }
        (rowptr, cols)
    }

    /// Contracts an entity-indexed vector with every column: `vᵀℙ`.
    pub fn contract(&self, entity_scores: &[f64]) -> Vec<f64> {
        (0..self.cols())
            .map(|c| {
                (self.colptr[c]..self.colptr[c + 1])
                    .map(|k| entity_scores[self.row_idx[k] as usize] * self.counts[k] as f64)
                    .sum()
            })
            .collect()
    }
}

/// Counts linked mentions per (entity, conversation).
pub fn build_frequency_matrix(corpus: &[Conversation], entity_count: usize) -> FrequencyMatrix {
    let mut colptr = Vec::with_capacity(corpus.len() + 1);
    let mut row_idx = Vec::new();
    let mut counts = Vec::new();
    colptr.push(0);
    for c in corpus {
        let mut column: BTreeMap<u32, u32> = BTreeMap::new();
        for m in &c.mentions {
            *column.entry(m.entity.0).or_insert(0) += 1;
        }
        for (e, n) in column {
            assert!((e as usize) < entity_count, "mention of undeclared entity");
            row_idx.push(e);
            counts.push(n);
        }
        colptr.push(row_idx.len());
    }
    FrequencyMatrix {
        rows: entity_count,
        colptr,
        row_idx,
        counts,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    entity_count: usize,
    item_count: usize,
    conversation_count: usize,
    adjacency: CsrMatrix,
    degree: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub entities: usize,
    pub items: usize,
    pub conversations: usize,
    /// Undirected edges (each stored twice in the adjacency).
    pub edges: usize,
    pub mention_edges: usize,
    pub cooccurrence_edges: usize,
    pub recommendation_edges: usize,
    pub kg_edges: usize,
    pub isolated_conversations: usize,
    pub frequency_nonzeros: usize,
}

impl InteractionGraph {
    pub fn new(
        entity_count: usize,
        item_count: usize,
        conversation_count: usize,
        adjacency: CsrMatrix,
    ) -> Result<Self> {
        let g = Self::assemble(entity_count, item_count, conversation_count, adjacency);
        g.validate()?;
        Ok(g)
    }

    fn assemble(entity_count: usize, item_count: usize, conversation_count: usize, adjacency: CsrMatrix) -> Self {
        let degree = (0..adjacency.dim()).map(|i| adjacency.weighted_degree(i)).collect();
        Self {
            entity_count,
            item_count,
            conversation_count,
            adjacency,
            degree,
        }
    }

    pub fn node_count(&self) -> usize {
        self.entity_count + self.conversation_count
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn conversation_count(&self) -> usize {
        self.conversation_count
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    /// Weighted degree of every node.
    pub fn degrees(&self) -> &[f64] {
        &self.degree
    }

    pub fn conversation_node(&self, c: ConversationId) -> usize {
        self.entity_count + c.index()
    }

    pub fn is_entity_node(&self, node: usize) -> bool {
        node < self.entity_count
    }

    pub fn is_item_node(&self, node: usize) -> bool {
        node < self.item_count
    }

    /// Checks symmetry, positivity, absence of self-loops and that every
    /// edge kind connects the node classes it is allowed to.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("interaction graph: {m}")));
        let a = &self.adjacency;
        if a.dim() != self.node_count() {
            return bad(format!(
                "adjacency dimension {} != node count {}",
                a.dim(),
                self.node_count()
            ));
        }
        if self.item_count > self.entity_count {
            return bad("more items than entities".into());
        }
        if a.values().iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad("non-positive edge weight".into());
        }
        if a.has_self_loops() {
            return bad("self-loop".into());
        }
        if !a.is_symmetric() {
            return bad("adjacency not symmetric".into());
        }
        for u in 0..a.dim() {
            for (v, _, tags) in a.row(u) {
                if tags == 0 || tags & !edge_kind::ALL != 0 {
                    return bad(format!("edge ({u},{v}) has invalid kind bits {tags:#x}"));
                }
                let (ue, ve) = (self.is_entity_node(u), self.is_entity_node(v));
                let entity_pair = ue && ve;
                let mixed = ue != ve;
                if tags & (edge_kind::COOCCURRENCE | edge_kind::KG) != 0 && !entity_pair {
                    return bad(format!("entity-entity edge kind on ({u},{v})"));
                }
                if tags & edge_kind::MENTION != 0 && !mixed {
                    return bad(format!("mention edge ({u},{v}) not entity-conversation"));
                }
                if tags & edge_kind::RECOMMENDATION != 0 && !(mixed && (self.is_item_node(u) || self.is_item_node(v))) {
                    return bad(format!("recommendation edge ({u},{v}) not item-conversation"));
                }
            }
        }
        Ok(())
    }

    pub fn stats(&self, frequency: &FrequencyMatrix) -> GraphStats {
        let mut stats = GraphStats {
            entities: self.entity_count,
            items: self.item_count,
            conversations: self.conversation_count,
            frequency_nonzeros: frequency.nnz(),
            ..Default::default()
        };
        for u in 0..self.node_count() {
            for (v, _, tags) in self.adjacency.row(u) {
                if v <= u {
                    continue;
                }
                stats.edges += 1;
                stats.mention_edges += usize::from(tags & edge_kind::MENTION != 0);
                stats.cooccurrence_edges += usize::from(tags & edge_kind::COOCCURRENCE != 0);
                stats.recommendation_edges += usize::from(tags & edge_kind::RECOMMENDATION != 0);
                stats.kg_edges += usize::from(tags & edge_kind::KG != 0);
            }
        }
        stats.isolated_conversations = (self.entity_count..self.node_count())
            .filter(|&n| self.adjacency.degree(n) == 0)
            .count();
        stats
    }
}

/// Builds the interaction graph from a linked corpus.
pub fn build_interaction_graph(
    corpus: &[Conversation],
    kg: &KnowledgeGraph,
    frequency: &FrequencyMatrix,
    config: &IndexConfig,
) -> InteractionGraph {
    let n_entities = kg.entity_count();
    let n = n_entities + corpus.len();
    let mut builder = SymmetricBuilder::new(n);

    let mut cooc: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for c in corpus {
        let node = n_entities + c.id.index();
        let mentioned: Vec<(EntityId, u32)> = frequency.column(c.id).collect();
        for &(e, count) in &mentioned {
            let capped = config.mention_cap.map_or(count, |cap| count.min(cap));
            builder.add(e.index(), node, config.w_mention * capped as f64, edge_kind::MENTION);
        }
        for (i, &(a, _)) in mentioned.iter().enumerate() {
            for &(b, _) in &mentioned[i + 1..] {
                *cooc.entry((a.0, b.0)).or_insert(0) += 1;
            }
        }
        let mut recommended: Vec<EntityId> = c
            .recommendations
            .iter()
            .filter(|r| r.accepted || config.include_rejected)
            .map(|r| r.item)
            .collect();
        recommended.sort_unstable();
        recommended.dedup();
        for item in recommended {
            builder.add(item.index(), node, config.w_rec, edge_kind::RECOMMENDATION);
        }
    }
    for (&(a, b), &count) in &cooc {
        if count >= config.min_cooc {
            builder.add(
                a as usize,
                b as usize,
                config.w_cooc * count as f64,
                edge_kind::COOCCURRENCE,
            );
        }
    }
    let kg_adj = kg.adjacency();
    for u in 0..n_entities {
        for (v, w, _) in kg_adj.row(u) {
            if u < v {
                builder.add(u, v, config.w_kg * w, edge_kind::KG);
            }
        }
    }

    let graph = InteractionGraph::assemble(n_entities, kg.item_count(), corpus.len(), builder.build());
    let isolated = (n_entities..n)
        .filter(|&node| graph.adjacency.degree(node) == 0)
        .count();
    if isolated > 0 {
        tracing::warn!(
            isolated,
            "conversations without mentions or accepted recommendations have no edges"
        );
    }
    graph
}

/// Everything retrieval needs at query time.
#[derive(Debug, Clone)]
pub struct Index {
    pub kg: KnowledgeGraph,
    /// Training corpus with linked mentions.
    pub corpus: Vec<Conversation>,
    pub frequency: FrequencyMatrix,
    pub graph: InteractionGraph,
    pub config: IndexConfig,
    linker: Arc<EntityLinker>,
    popularity: Vec<f64>,
    mention_rowptr: Vec<usize>,
    mention_cols: Vec<u32>,
}

impl Index {
    pub fn from_parts(
        kg: KnowledgeGraph,
        corpus: Vec<Conversation>,
        frequency: FrequencyMatrix,
        graph: InteractionGraph,
        config: IndexConfig,
    ) -> Self {
        let linker = Arc::new(EntityLinker::new(&kg));
        let mut popularity = vec![0.0; kg.item_count()];
        for c in &corpus {
            for item in c.accepted_items() {
                popularity[item.index()] += 1.0;
            }
        }
        let (mention_rowptr, mention_cols) = frequency.entity_rows();
        Self {
            kg,
            corpus,
            frequency,
            graph,
            config,
            linker,
            popularity,
            mention_rowptr,
            mention_cols,
        }
    }

    pub fn linker(&self) -> &Arc<EntityLinker> {
        &self.linker
    }

    /// Accepted-recommendation count per item in the training corpus.
    pub fn popularity(&self) -> &[f64] {
        &self.popularity
    }

    /// Conversations mentioning `entity`, by id.
    pub fn conversations_mentioning(&self, entity: EntityId) -> &[u32] {
        let e = entity.index();
        &self.mention_cols[self.mention_rowptr[e]..self.mention_rowptr[e + 1]]
    }

    pub fn conversation(&self, id: ConversationId) -> &Conversation {
        &self.corpus[id.index()]
    }

    pub fn stats(&self) -> GraphStats {
        self.graph.stats(&self.frequency)
    }

    /// Checks every cross-structure invariant of a built or loaded index.
    pub fn validate(&self) -> Result<()> {
        self.kg.validate()?;
        self.graph.validate()?;
        let bad = |m: &str| Err(Error::Validation(format!("index: {m}")));
        if self.graph.entity_count() != self.kg.entity_count()
            || self.graph.item_count() != self.kg.item_count()
            || self.graph.conversation_count() != self.corpus.len()
        {
            return bad("graph shape disagrees with catalog or corpus");
        }
        if self.frequency.rows() != self.kg.entity_count() || self.frequency.cols() != self.corpus.len() {
            return bad("frequency matrix shape disagrees with catalog or corpus");
        }
        for (i, c) in self.corpus.iter().enumerate() {
            if c.id.index() != i {
                return bad("conversation ids are not contiguous");
            }
            c.validate(&self.kg)?;
        }
        if build_frequency_matrix(&self.corpus, self.kg.entity_count()) != self.frequency {
            return bad("frequency matrix disagrees with corpus mentions");
        }
        let n_entities = self.kg.entity_count();
        for c in &self.corpus {
            let node = n_entities + c.id.index();
            for (nbr, _, tags) in self.graph.adjacency().row(node) {
                let has_mention_edge = tags & edge_kind::MENTION != 0;
                if has_mention_edge != (self.frequency.get(EntityId(nbr as u32), c.id) > 0) {
                    return bad("mention edges disagree with the frequency matrix");
                }
            }
            let mention_degree = self
                .graph
                .adjacency()
                .row(node)
                .filter(|e| e.2 & edge_kind::MENTION != 0)
                .count();
            if mention_degree != self.frequency.column(c.id).count() {
                return bad("mention edges disagree with the frequency matrix");
            }
        }
        Ok(())
    }
}

/// Links the corpus (when configured), then builds the frequency matrix and
/// interaction graph.
pub fn build_index(kg: KnowledgeGraph, mut corpus: Vec<Conversation>, config: IndexConfig) -> Result<Index> {
    config.validate()?;
    for c in &corpus {
        c.validate(&kg)?;
    }
    if config.link_corpus_text {
        let extractor = DictionaryExtractor::new(Arc::new(EntityLinker::new(&kg)), config.link_threshold);
        link_corpus(&mut corpus, &extractor);
    }
    let frequency = build_frequency_matrix(&corpus, kg.entity_count());
    let graph = build_interaction_graph(&corpus, &kg, &frequency, &config);
    Ok(Index::from_parts(kg, corpus, frequency, graph, config))
}

pub fn link_corpus(corpus: &mut [Conversation], extractor: &dyn EntityExtractor) {
    for c in corpus {
        link_conversation(c, extractor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Mention, Recommendation, Turn};
    use crate::kg::KgOptions;

    fn kg(text: &str) -> KnowledgeGraph {
        KnowledgeGraph::parse(text, "kg", KgOptions::default()).unwrap()
    }

    fn entities(n: usize, items: usize) -> String {
        (0..n)
            .map(|i| {
                let kind = if i < items { "item" } else { "attribute" };
                format!("E\te{i}\t{kind}\tEntity number {i}\n")
            })
            .collect()
    }

    fn conversation(id: u32, mentions: &[(usize, u32)], recs: &[(u32, bool)]) -> Conversation {
        Conversation {
            id: ConversationId(id),
            key: format!("c{id}"),
            turns: vec![Turn::user("a"), Turn::recommender("b")],
            mentions: mentions
                .iter()
                .map(|&(turn, e)| Mention {
                    turn,
                    entity: EntityId(e),
                })
                .collect(),
            recommendations: recs
                .iter()
                .map(|&(i, accepted)| Recommendation {
                    turn: 1,
                    item: EntityId(i),
                    accepted,
                })
                .collect(),
        }
    }

    fn config_uncapped() -> IndexConfig {
        IndexConfig {
            w_rec: 1.0,
            mention_cap: None,
            min_cooc: 1,
            link_corpus_text: false,
            ..Default::default()
        }
    }

    #[test]
    fn frequency_counts_repeated_mentions() {
        let corpus = vec![conversation(0, &[(0, 4), (0, 4), (1, 4)], &[])];
        let p = build_frequency_matrix(&corpus, 6);
        assert_eq!(p.get(EntityId(4), ConversationId(0)), 3);
        assert_eq!(p.nnz(), 1);
    }

    #[test]
    fn frequency_of_empty_corpus_has_no_columns() {
        let p = build_frequency_matrix(&[], 6);
        assert_eq!(p.cols(), 0);
        assert_eq!(p.rows(), 6);
    }

    #[test]
    fn single_conversation_graph() {
        let kg = kg(&entities(6, 2));
        let corpus = vec![conversation(0, &[(0, 2), (0, 5)], &[(0, true)])];
        let p = build_frequency_matrix(&corpus, kg.entity_count());
        let g = build_interaction_graph(&corpus, &kg, &p, &config_uncapped());
        let a = g.adjacency();
        let c = g.conversation_node(ConversationId(0));
        assert_eq!(a.nnz(), 8);
        assert_eq!(a.get(2, c), Some(1.0));
        assert_eq!(a.get(5, c), Some(1.0));
        assert_eq!(a.get(2, 5), Some(1.0));
        assert_eq!(a.get(0, c), Some(1.0));
        g.validate().unwrap();
    }

    #[test]
    fn cooccurrence_weight_counts_conversations() {
        let kg = kg(&entities(6, 2));
        let corpus = vec![
            conversation(0, &[(0, 2), (0, 5)], &[]),
            conversation(1, &[(0, 5), (1, 2)], &[]),
        ];
        let p = build_frequency_matrix(&corpus, kg.entity_count());
        let g = build_interaction_graph(&corpus, &kg, &p, &config_uncapped());
        assert_eq!(g.adjacency().get(2, 5), Some(2.0));
        let strict = IndexConfig {
            min_cooc: 3,
            ..config_uncapped()
        };
        let g = build_interaction_graph(&corpus, &kg, &p, &strict);
        assert_eq!(g.adjacency().get(2, 5), None);
    }

    #[test]
    fn default_weights_cap_mentions_and_boost_recs() {
        let kg = kg(&entities(6, 2));
        let corpus = vec![conversation(
            0,
            &[(0, 3), (0, 3), (0, 3), (0, 3), (1, 3)],
            &[(1, true), (0, false)],
        )];
        let p = build_frequency_matrix(&corpus, kg.entity_count());
        let g = build_interaction_graph(&corpus, &kg, &p, &IndexConfig::default());
        let c = g.conversation_node(ConversationId(0));
        assert_eq!(g.adjacency().get(3, c), Some(3.0));
        assert_eq!(g.adjacency().get(1, c), Some(2.0));
        assert_eq!(g.adjacency().get(0, c), None);
    }

    #[test]
    fn kg_edges_are_imported() {
        let mut text = entities(3, 1);
        text.push_str("T\te0\tstarring\te2\n");
        let kg = kg(&text);
        let p = build_frequency_matrix(&[], kg.entity_count());
        let g = build_interaction_graph(&[], &kg, &p, &IndexConfig::default());
        assert_eq!(g.adjacency().get(0, 2), Some(1.0));
        assert_eq!(g.adjacency().tags()[0], edge_kind::KG);
    }

    #[test]
    fn isolated_conversation_keeps_its_node() {
        let kg = kg(&entities(3, 1));
        let corpus = vec![conversation(0, &[], &[(0, false)])];
        let index = build_index(kg, corpus, IndexConfig::default()).unwrap();
        assert_eq!(index.graph.node_count(), 4);
        assert_eq!(index.stats().isolated_conversations, 1);
        index.validate().unwrap();
    }

    #[test]
    fn contract_is_rt_p() {
        let corpus = vec![
            conversation(0, &[(0, 4), (0, 4), (0, 4)], &[]),
            conversation(1, &[(0, 4)], &[]),
        ];
        let p = build_frequency_matrix(&corpus, 6);
        let mut r = vec![0.0; 6];
        r[4] = 1.0;
        assert_eq!(p.contract(&r), vec![3.0, 1.0]);
    }
}

//! Dictionary entity linking and fuzzy title matching.
//!
//! Every entity contributes one or more surface forms: its canonical name, its
//! aliases, and (when long enough) the same strings with a trailing release
//! year removed. Forms are compared by token-sort similarity (see
//! [`crate::text`]). In running text, candidate spans are contiguous token
//! windows; overlapping candidates are resolved greedily by score, then span
//! length, then earlier start, then lower entity id.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, History, Mention};
use crate::kg::{EntityId, ItemId, KnowledgeGraph};
use crate::llm::{ChatClient, ChatMessage, ChatRequest};
use crate::text::{self, Token};

/// Year-stripped forms shorter than this are not registered; short titles
/// such as "It" would otherwise link ordinary words.
const MIN_STRIPPED_FORM_CHARS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    #[default]
    Dictionary,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkerConfig {
    /// Minimum similarity for spans linked in dialogue text.
    pub link_threshold: f64,
    /// Minimum similarity for grounding LLM-produced titles.
    pub match_threshold: f64,
    pub extractor: ExtractorKind,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        Self {
            link_threshold: 0.90,
            match_threshold: 0.85,
            extractor: ExtractorKind::Dictionary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionSpan {
    /// Character offset of the first character.
    pub start: usize,
    /// Character offset one past the last character.
    pub end: usize,
    pub surface: String,
    pub entity: EntityId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TitleMatch {
    pub item: ItemId,
    pub score: f64,
}

struct Form {
    key: String,
    profile: text::CharProfile,
    entity: EntityId,
}

/// Surface-form dictionary over one knowledge graph.
pub struct EntityLinker {
    forms: Vec<Form>,
    exact: HashMap<String, Vec<EntityId>>,
    by_len: BTreeMap<usize, Vec<u32>>,
    per_entity: Vec<Vec<u32>>,
    years: Vec<Option<u16>>,
    item_count: usize,
    max_tokens: usize,
}

impl std::fmt::Debug for EntityLinker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EntityLinker")
            .field("forms", &self.forms.len())
            .field("max_tokens", &self.max_tokens)
            .finish()
    }
}

fn token_texts(s: &str) -> Vec<String> {
    text::tokenize(s).into_iter().map(|t| t.text).collect()
}

/// Sorted-token keys for a string: as written, and without a trailing year.
fn form_keys(s: &str) -> Vec<(String, usize)> {
    let tokens = token_texts(s);
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut keys = vec![(text::sort_key(&tokens), tokens.len())];
    let (stripped, year) = text::split_trailing_year(&tokens);
    if year.is_some() {
        let key = text::sort_key(stripped);
        if key.chars().count() >= MIN_STRIPPED_FORM_CHARS {
            keys.push((key, stripped.len()));
        }
    }
    keys
}

impl EntityLinker {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let mut forms = Vec::new();
        let mut exact: HashMap<String, Vec<EntityId>> = HashMap::new();
        let mut by_len: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        let mut per_entity = vec![Vec::new(); kg.entity_count()];
        let mut max_tokens = 0;
        for e in kg.entities() {
            let mut seen: Vec<String> = Vec::new();
            for surface in std::iter::once(&e.name).chain(&e.aliases) {
                for (key, n_tokens) in form_keys(surface) {
                    if seen.contains(&key) {
                        continue;
                    }
                    seen.push(key.clone());
                    max_tokens = max_tokens.max(n_tokens);
                    let idx = forms.len() as u32;
                    let chars = key.chars().count();
                    exact.entry(key.clone()).or_default().push(e.id);
                    by_len.entry(chars).or_default().push(idx);
                    per_entity[e.id.index()].push(idx);
                    forms.push(Form {
                        profile: text::CharProfile::new(&key),
                        key,
                        entity: e.id,
                    });
                }
            }
        }
        for ids in exact.values_mut() {
            ids.sort_unstable();
            ids.dedup();
        }
        Self {
            forms,
            exact,
            by_len,
            per_entity,
            years: kg.entities().iter().map(|e| e.year).collect(),
            item_count: kg.item_count(),
            max_tokens,
        }
    }

    /// Best score of each entity whose forms match `key` at `threshold`.
    fn matches(&self, key: &str, threshold: f64, out: &mut Vec<(EntityId, f64)>) {
        out.clear();
        if let Some(ids) = self.exact.get(key) {
            out.extend(ids.iter().map(|&id| (id, 1.0)));
        }
        if threshold >= 1.0 {
            return;
        }
        let profile = text::CharProfile::new(key);
        let len = profile.len();
        let lo = (threshold * len as f64).ceil() as usize;
        let hi = (len as f64 / threshold).floor() as usize;
        for (_, bucket) in self.by_len.range(lo..=hi) {
            for &idx in bucket {
                let form = &self.forms[idx as usize];
                if form.key == key || profile.similarity_upper_bound(&form.profile) < threshold {
                    continue;
                }
                let score = text::key_similarity(key, &form.key);
                if score >= threshold {
                    match out.iter_mut().find(|(id, _)| *id == form.entity) {
                        Some(slot) => slot.1 = slot.1.max(score),
                        None => out.push((form.entity, score)),
                    }
                }
            }
        }
    }

    fn candidate_spans(&self, tokens: &[Token], threshold: f64) -> Vec<(usize, usize, EntityId, f64)> {
        let window = if threshold < 1.0 {
            self.max_tokens + 1
        } else {
            self.max_tokens
        };
        let mut candidates = Vec::new();
        let mut scratch = Vec::new();
        for i in 0..tokens.len() {
            for len in 1..=window.min(tokens.len() - i) {
                let span = &tokens[i..i + len];
                let words: Vec<&str> = span.iter().map(|t| t.text.as_str()).collect();
                let key = text::sort_key(&words);
                self.matches(&key, threshold, &mut scratch);
                for &(entity, score) in &scratch {
                    candidates.push((i, i + len, entity, score));
                }
            }
        }
        candidates
    }

    /// Links entity mentions in `text`. Returned spans do not overlap and are
    /// ordered by start offset.
    pub fn link(&self, text: &str, threshold: f64) -> Vec<MentionSpan> {
        let tokens = text::tokenize(text);
        if tokens.is_empty() {
            return Vec::new();
        }
        let mut candidates = self.candidate_spans(&tokens, threshold);
        let char_span = |c: &(usize, usize, EntityId, f64)| (tokens[c.0].start, tokens[c.1 - 1].end);
        candidates.sort_by(|a, b| {
            let (sa, ea) = char_span(a);
            let (sb, eb) = char_span(b);
            b.3.total_cmp(&a.3)
                .then((eb - sb).cmp(&(ea - sa)))
                .then(sa.cmp(&sb))
                .then(a.2.cmp(&b.2))
        });
        let chars: Vec<char> = text.chars().collect();
        let mut taken = vec![false; chars.len()];
        let mut spans = Vec::new();
        for c in &candidates {
            let (start, end) = char_span(c);
            if taken[start..end].iter().any(|&t| t) {
                continue;
            }
            taken[start..end].iter_mut().for_each(|t| *t = true);
            spans.push(MentionSpan {
                start,
                end,
                surface: chars[start..end].iter().collect(),
                entity: c.2,
                score: c.3,
            });
        }
        spans.sort_by_key(|s| s.start);
        spans
    }

    /// Highest-scoring span of `text` matching `entity`, if any reaches
    /// `threshold`.
    pub fn locate(&self, text: &str, entity: EntityId, threshold: f64) -> Option<MentionSpan> {
        let tokens = text::tokenize(text);
        let chars: Vec<char> = text.chars().collect();
        let forms = self.per_entity.get(entity.index())?;
        let mut best: Option<MentionSpan> = None;
        for i in 0..tokens.len() {
            for len in 1..=(self.max_tokens + 1).min(tokens.len() - i) {
                let words: Vec<&str> = tokens[i..i + len].iter().map(|t| t.text.as_str()).collect();
                let key = text::sort_key(&words);
                let score = forms
                    .iter()
                    .map(|&f| text::key_similarity(&key, &self.forms[f as usize].key))
                    .fold(0.0, f64::max);
                if score >= threshold && best.as_ref().is_none_or(|b| score > b.score) {
                    let (start, end) = (tokens[i].start, tokens[i + len - 1].end);
                    best = Some(MentionSpan {
                        start,
                        end,
                        surface: chars[start..end].iter().collect(),
                        entity,
                        score,
                    });
                }
            }
        }
        best
    }

    /// Best similarity between any form of `entity` and any query key, or 0
    /// when none can reach `threshold`.
    fn form_score(&self, entity: EntityId, query: &[(String, text::CharProfile)], threshold: f64) -> f64 {
        let mut best = 0.0f64;
        for &f in &self.per_entity[entity.index()] {
            let form = &self.forms[f as usize];
            for (q, profile) in query {
                if profile.similarity_upper_bound(&form.profile) < threshold.max(best) {
                    continue;
                }
                best = best.max(text::key_similarity(q, &form.key));
            }
        }
        best
    }

    fn best_of(&self, query: &str, threshold: f64, pool: impl Iterator<Item = EntityId>) -> Option<(EntityId, f64)> {
        let keys: Vec<(String, text::CharProfile)> = form_keys(query)
            .into_iter()
            .map(|(k, _)| {
                let profile = text::CharProfile::new(&k);
                (k, profile)
            })
            .collect();
        if keys.is_empty() {
            return None;
        }
        let year = text::find_year(query);
        let mut best: Option<(EntityId, f64, bool)> = None;
        for id in pool {
            let score = self.form_score(id, &keys, threshold);
            if score < threshold {
                continue;
            }
            let year_match = year.is_some() && self.years[id.index()] == year;
            let better = match best {
                None => true,
                Some((bid, bscore, byear)) => {
                    score > bscore
                        || (score == bscore && year_match && !byear)
                        || (score == bscore && year_match == byear && id < bid)
                }
            };
            if better {
                best = Some((id, score, year_match));
            }
        }
        best.map(|(id, score, _)| (id, score))
    }

    /// Best catalog item for a free-form title. Ties prefer an item whose
    /// year equals a year written in the query, then the lower id.
    pub fn match_title(&self, candidate: &str, threshold: f64) -> Option<TitleMatch> {
        self.best_of(candidate, threshold, (0..self.item_count as u32).map(EntityId))
            .map(|(item, score)| TitleMatch { item, score })
    }

    /// Like [`Self::match_title`] but restricted to `allowed` items.
    pub fn match_title_among(&self, candidate: &str, threshold: f64, allowed: &[ItemId]) -> Option<TitleMatch> {
        self.best_of(candidate, threshold, allowed.iter().copied())
            .map(|(item, score)| TitleMatch { item, score })
    }

    /// Best entity of any kind for a free-form name.
    pub fn match_entity(&self, name: &str, threshold: f64) -> Option<(EntityId, f64)> {
        self.best_of(name, threshold, (0..self.per_entity.len() as u32).map(EntityId))
    }
}

/// Links mentions in `text`. Builds a dictionary per call; hold an
/// [`EntityLinker`] when linking repeatedly.
pub fn link_entities(text: &str, kg: &KnowledgeGraph, config: &LinkerConfig) -> Vec<MentionSpan> {
    EntityLinker::new(kg).link(text, config.link_threshold)
}

pub fn fuzzy_title_match(candidate: &str, kg: &KnowledgeGraph, config: &LinkerConfig) -> Option<ItemId> {
    EntityLinker::new(kg)
        .match_title(candidate, config.match_threshold)
        .map(|m| m.item)
}

/// Source of mention spans for a piece of dialogue text.
pub trait EntityExtractor: Send + Sync {
    fn extract(&self, text: &str) -> Vec<MentionSpan>;
}

pub struct DictionaryExtractor {
    linker: Arc<EntityLinker>,
    threshold: f64,
}

impl DictionaryExtractor {
    pub fn new(linker: Arc<EntityLinker>, threshold: f64) -> Self {
        Self { linker, threshold }
    }
}

impl EntityExtractor for DictionaryExtractor {
    fn extract(&self, text: &str) -> Vec<MentionSpan> {
        self.linker.link(text, self.threshold)
    }
}

/// Asks a chat model to list mentioned names, then grounds each name in the
/// catalog and locates it in the text. Names that cannot be grounded or
/// located are dropped.
pub struct LlmExtractor {
    client: Arc<dyn ChatClient>,
    linker: Arc<EntityLinker>,
    threshold: f64,
}

pub const EXTRACTION_INSTRUCTIONS: &str = "List every movie title, person, or genre named in the \
user's text. Write one name per line and nothing else. Write NONE if there are no names.";

impl LlmExtractor {
    pub fn new(client: Arc<dyn ChatClient>, linker: Arc<EntityLinker>, threshold: f64) -> Self {
        Self {
            client,
            linker,
            threshold,
        }
    }
}

impl EntityExtractor for LlmExtractor {
    fn extract(&self, text: &str) -> Vec<MentionSpan> {
        if text.trim().is_empty() {
            return Vec::new();
        }
        let request = ChatRequest {
            model: self.client.model_id().to_string(),
            messages: vec![ChatMessage::system(EXTRACTION_INSTRUCTIONS), ChatMessage::user(text)],
            temperature: 0.0,
            max_tokens: 256,
        };
        let reply = match self.client.complete(&request) {
            Ok(reply) => reply,
            Err(err) => {
                tracing::warn!(%err, "llm entity extraction failed; no mentions extracted");
                return Vec::new();
            }
        };
        let mut spans: Vec<MentionSpan> = Vec::new();
        for line in reply.lines() {
            let name = line.trim().trim_start_matches(['-', '*', ' ']);
            if name.is_empty() || name.eq_ignore_ascii_case("none") {
                continue;
            }
            let Some((entity, _)) = self.linker.match_entity(name, self.threshold) else {
                continue;
            };
            if let Some(span) = self.linker.locate(text, entity, self.threshold) {
                if spans.iter().all(|s| s.end <= span.start || span.end <= s.start) {
                    spans.push(span);
                }
            }
        }
        spans.sort_by_key(|s| s.start);
        spans
    }
}

/// Ordered, deduplicated entities of a conversation prefix: per turn,
/// pre-annotated mentions first, then linked spans by offset.
pub fn extract_history_entities(history: &History, extractor: &dyn EntityExtractor) -> Vec<EntityId> {
    let mut ordered = Vec::new();
    for (turn_idx, turn) in history.turns.iter().enumerate() {
        let annotated = history.mentions.iter().filter(|m| m.turn == turn_idx).map(|m| m.entity);
        let linked = extractor.extract(&turn.text).into_iter().map(|s| s.entity);
        for entity in annotated.chain(linked) {
            if !ordered.contains(&entity) {
                ordered.push(entity);
            }
        }
    }
    // Annotations pointing past the last turn still count.
    for m in &history.mentions {
        if m.turn >= history.turns.len() && !ordered.contains(&m.entity) {
            ordered.push(m.entity);
        }
    }
    ordered
}

/// Merges linked text mentions into a conversation's annotations. For each
/// (turn, entity) the resulting count is the larger of the annotated count and
/// the linked count.
pub fn link_conversation(conversation: &mut Conversation, extractor: &dyn EntityExtractor) {
    let mut merged = Vec::new();
    for (turn_idx, turn) in conversation.turns.iter().enumerate() {
        let mut counts: BTreeMap<EntityId, (usize, usize)> = BTreeMap::new();
        let mut order: Vec<EntityId> = Vec::new();
        for m in conversation.mentions.iter().filter(|m| m.turn == turn_idx) {
            if !counts.contains_key(&m.entity) {
                order.push(m.entity);
            }
            counts.entry(m.entity).or_default().0 += 1;
        }
        for span in extractor.extract(&turn.text) {
            if !counts.contains_key(&span.entity) {
                order.push(span.entity);
            }
            counts.entry(span.entity).or_default().1 += 1;
        }
        for entity in order {
            let (annotated, linked) = counts[&entity];
            for _ in 0..annotated.max(linked) {
                merged.push(Mention { turn: turn_idx, entity });
            }
        }
    }
    conversation.mentions = merged;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::kg::KgOptions;

    fn kg() -> KnowledgeGraph {
        let text = "\
E\tm0\titem\tBraveheart (1995)
E\tm1\titem\tMad Max (1979)
E\tm2\titem\tMad Max Beyond Thunderdome (1985)
E\tm3\titem\tIt (2017)
E\tm4\titem\tCrash (1996)\tCrash 1996
E\tm5\titem\tCrash (2004)\tCrash 2004
E\ta0\tattribute\tMel Gibson\tGibson
";
        KnowledgeGraph::parse(text, "kg", KgOptions::default()).unwrap()
    }

    #[test]
    fn substring_alias_links_item() {
        let linker = EntityLinker::new(&kg());
        let spans = linker.link("I loved Braveheart", 0.9);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].entity, EntityId(0));
        assert_eq!(spans[0].surface, "Braveheart");
        assert_eq!((spans[0].start, spans[0].end), (8, 18));
    }

    #[test]
    fn empty_text_links_nothing() {
        assert!(EntityLinker::new(&kg()).link("", 0.9).is_empty());
    }

    #[test]
    fn short_year_stripped_titles_are_not_registered() {
        let linker = EntityLinker::new(&kg());
        assert!(linker.link("I loved it", 1.0).is_empty());
        assert_eq!(linker.link("It (2017) was scary", 1.0)[0].entity, EntityId(3));
    }

    #[test]
    fn longest_match_wins() {
        let spans = EntityLinker::new(&kg()).link("watch mad max beyond thunderdome with mel gibson", 1.0);
        let ids: Vec<_> = spans.iter().map(|s| s.entity).collect();
        assert_eq!(ids, [EntityId(2), EntityId(6)]);
    }

    #[test]
    fn fuzzy_span_links_misspelling() {
        let spans = EntityLinker::new(&kg()).link("loved bravehaert", 0.8);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].entity, EntityId(0));
        assert!(spans[0].score < 1.0 && spans[0].score >= 0.8);
    }

    #[test]
    fn title_match_exact_and_normalized() {
        let linker = EntityLinker::new(&kg());
        let m = linker.match_title("Braveheart (1995)", 0.85).unwrap();
        assert_eq!((m.item, m.score), (EntityId(0), 1.0));
        assert_eq!(linker.match_title("braveheart 1995", 0.85).unwrap().item, EntityId(0));
        assert!(linker.match_title("Casablanca", 0.85).is_none());
    }

    #[test]
    fn title_match_year_breaks_ties() {
        let linker = EntityLinker::new(&kg());
        assert_eq!(linker.match_title("Crash", 0.85).unwrap().item, EntityId(4));
        assert_eq!(linker.match_title("Crash (2004)", 0.85).unwrap().item, EntityId(5));
        assert_eq!(linker.match_title("crash 1996", 0.85).unwrap().item, EntityId(4));
    }

    #[test]
    fn title_match_among_restricts_pool() {
        let linker = EntityLinker::new(&kg());
        assert!(linker.match_title_among("Braveheart", 0.85, &[EntityId(1)]).is_none());
        assert_eq!(
            linker
                .match_title_among("Mad Max", 0.85, &[EntityId(1), EntityId(2)])
                .unwrap()
                .item,
            EntityId(1)
        );
    }

    struct Fixed(Vec<MentionSpan>);
    impl EntityExtractor for Fixed {
        fn extract(&self, _: &str) -> Vec<MentionSpan> {
            self.0.clone()
        }
    }

    #[test]
    fn history_entities_dedup_annotations() {
        let kg = kg();
        let dict = DictionaryExtractor::new(Arc::new(EntityLinker::new(&kg)), 0.9);
        let history = History {
            turns: vec![Turn::user("I adore Mel Gibson")],
            mentions: vec![Mention {
                turn: 0,
                entity: EntityId(6),
            }],
        };
        assert_eq!(extract_history_entities(&history, &dict), vec![EntityId(6)]);
    }

    #[test]
    fn history_entities_keep_first_mention_order() {
        let kg = kg();
        let dict = DictionaryExtractor::new(Arc::new(EntityLinker::new(&kg)), 0.9);
        let history = History::from_turns(vec![
            Turn::user("Mad Max (1979) was good"),
            Turn::recommender("Have you seen Braveheart?"),
            Turn::user("Mad Max again"),
        ]);
        assert_eq!(
            extract_history_entities(&history, &dict),
            vec![EntityId(1), EntityId(0)]
        );
    }

    #[test]
    fn link_conversation_takes_max_of_counts() {
        let span = |entity| MentionSpan {
            start: 0,
            end: 1,
            surface: "x".into(),
            entity,
            score: 1.0,
        };
        let extractor = Fixed(vec![span(EntityId(1)), span(EntityId(1)), span(EntityId(2))]);
        let mut c = Conversation {
            id: Default::default(),
            key: "c".into(),
            turns: vec![Turn::user("x")],
            mentions: vec![
                Mention {
                    turn: 0,
                    entity: EntityId(2),
                },
                Mention {
                    turn: 0,
                    entity: EntityId(2),
                },
                Mention {
                    turn: 0,
                    entity: EntityId(3),
                },
            ],
            recommendations: vec![],
        };
        link_conversation(&mut c, &extractor);
        let ids: Vec<u32> = c.mentions.iter().map(|m| m.entity.0).collect();
        assert_eq!(ids, [2, 2, 3, 1, 1]);
    }
}

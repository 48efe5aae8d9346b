//! Dialogue corpora in JSON Lines form, and evaluation instances cut from
//! them.
//!
//! Each line is one conversation:
//!
//! ```json
//! {"id": "c1", "turns": [{"speaker": "user", "text": "..."}],
//!  "mentions": [{"turn": 0, "entity": "m12"}],
//!  "recs": [{"turn": 1, "item": "m3", "accepted": true}]}
//! ```
//!
//! Entity references are resolved against the knowledge graph by source id,
//! then by canonical name or alias.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, ItemId, KnowledgeGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ConversationId(pub u32);

impl ConversationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ConversationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Recommender,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::User => "User",
            Speaker::Recommender => "Recommender",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn recommender(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Recommender,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub turn: usize,
    pub entity: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recommendation {
    pub turn: usize,
    pub item: ItemId,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: ConversationId,
    /// Identifier from the source file.
    pub key: String,
    pub turns: Vec<Turn>,
    /// Linked mentions sorted by turn.
    pub mentions: Vec<Mention>,
    /// Recommendations sorted by turn.
    pub recommendations: Vec<Recommendation>,
}

impl Conversation {
    pub fn accepted_items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.recommendations.iter().filter(|r| r.accepted).map(|r| r.item)
    }

    pub fn full_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Checks turn ordering and bounds of mentions and recommendations.
    pub fn validate(&self, kg: &KnowledgeGraph) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("conversation {}: {msg}", self.key)));
        let mention_turns: Vec<usize> = self.mentions.iter().map(|m| m.turn).collect();
        let rec_turns: Vec<usize> = self.recommendations.iter().map(|r| r.turn).collect();
        for turns in [&mention_turns, &rec_turns] {
            if turns.windows(2).any(|w| w[0] > w[1]) {
                return fail("turn indices are not ordered".into());
            }
            if turns.iter().any(|&t| t >= self.turns.len()) {
                return fail("turn index out of range".into());
            }
        }
        if self.mentions.iter().any(|m| kg.get(m.entity).is_none()) {
            return fail("mention of undeclared entity".into());
        }
        if self.recommendations.iter().any(|r| !kg.is_item(r.item)) {
            return fail("recommendation of a non-item entity".into());
        }
        Ok(())
    }
}

/// Conversation prefix visible at query time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    pub turns: Vec<Turn>,
    /// Pre-annotated mentions inside the prefix.
    #[serde(default)]
    pub mentions: Vec<Mention>,
}

impl History {
    pub fn from_turns(turns: Vec<Turn>) -> Self {
        Self {
            turns,
            mentions: Vec::new(),
        }
    }

    pub fn text(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub conversation: ConversationId,
    pub conversation_key: String,
    /// Index of the recommender turn being predicted.
    pub turn: usize,
    pub history: History,
    /// Items recommended earlier in the same conversation.
    pub prior_recommendations: Vec<ItemId>,
    pub ground_truth: BTreeSet<ItemId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusOptions {
    /// Fail on unresolvable entity references instead of skipping them.
    #[serde(default)]
    pub strict: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawRef {
    Text(String),
    Number(u64),
}

impl RawRef {
    fn into_string(self) -> String {
        match self {
            RawRef::Text(s) => s,
            RawRef::Number(n) => n.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawMention {
    turn: usize,
    entity: RawRef,
}

fn default_accepted() -> bool {
    true
}

#[derive(Deserialize)]
struct RawRec {
    turn: usize,
    item: RawRef,
    #[serde(default = "default_accepted")]
    accepted: bool,
}

#[derive(Deserialize)]
struct RawConversation {
    id: RawRef,
    turns: Vec<Turn>,
    #[serde(default)]
    mentions: Vec<RawMention>,
    #[serde(default)]
    recs: Vec<RawRec>,
}

#[derive(Serialize)]
struct OutMention<'a> {
    turn: usize,
    entity: &'a str,
}

#[derive(Serialize)]
struct OutRec<'a> {
    turn: usize,
    item: &'a str,
    accepted: bool,
}

#[derive(Serialize)]
struct OutConversation<'a> {
    id: &'a str,
    turns: &'a [Turn],
    mentions: Vec<OutMention<'a>>,
    recs: Vec<OutRec<'a>>,
}

fn compare_keys(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

pub fn load_corpus(path: impl AsRef<Path>, kg: &KnowledgeGraph, options: CorpusOptions) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path, kg, options)
}

pub fn parse_corpus(
    text: &str,
    source: impl AsRef<Path>,
    kg: &KnowledgeGraph,
    options: CorpusOptions,
) -> Result<Vec<Conversation>> {
    let source = source.as_ref();
    let mut records = Vec::new();
    let mut keys = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: idx + 1,
            message,
        };
        let raw: RawConversation = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let key = raw.id.into_string();
        if !keys.insert(key.clone()) {
            return Err(parse_err(format!("duplicate conversation id {key:?}")));
        }
        let n_turns = raw.turns.len();

        let unresolved = |reference: String| -> Result<()> {
            if options.strict {
                Err(Error::UnresolvedEntity {
                    record: key.clone(),
                    reference,
                })
            } else {
                tracing::warn!(conversation = %key, %reference, "skipping unresolvable entity reference");
                Ok(())
            }
        };

        let mut mentions = Vec::with_capacity(raw.mentions.len());
        for m in raw.mentions {
            if m.turn >= n_turns {
                return Err(parse_err(format!("mention turn {} out of range", m.turn)));
            }
            let reference = m.entity.into_string();
            match kg.resolve(&reference) {
                Some(entity) => mentions.push(Mention { turn: m.turn, entity }),
                None => unresolved(reference)?,
            }
        }
        let mut recommendations = Vec::with_capacity(raw.recs.len());
        for r in raw.recs {
            if r.turn >= n_turns {
                return Err(parse_err(format!("recommendation turn {} out of range", r.turn)));
            }
            let reference = r.item.into_string();
            match kg.resolve(&reference).filter(|&id| kg.is_item(id)) {
                Some(item) => recommendations.push(Recommendation {
                    turn: r.turn,
                    item,
                    accepted: r.accepted,
                }),
                None => unresolved(reference)?,
            }
        }
        mentions.sort_by_key(|m| m.turn);
        recommendations.sort_by_key(|r| r.turn);
        records.push(Conversation {
            id: ConversationId(0),
            key,
            turns: raw.turns,
            mentions,
            recommendations,
        });
    }
    records.sort_by(|a, b| compare_keys(&a.key, &b.key));
    for (i, c) in records.iter_mut().enumerate() {
        c.id = ConversationId(i as u32);
    }
    Ok(records)
}

/// Writes conversations back to JSON Lines, referencing entities by source id.
pub fn corpus_to_jsonl(corpus: &[Conversation], kg: &KnowledgeGraph) -> String {
    let mut out = String::new();
    for c in corpus {
        let record = OutConversation {
            id: &c.key,
            turns: &c.turns,
            mentions: c
                .mentions
                .iter()
                .map(|m| OutMention {
                    turn: m.turn,
                    entity: &kg.entity(m.entity).key,
                })
                .collect(),
            recs: c
                .recommendations
                .iter()
                .map(|r| OutRec {
                    turn: r.turn,
                    item: &kg.entity(r.item).key,
                    accepted: r.accepted,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("corpus records serialize"));
        out.push('\n');
    }
    out
}

/// One instance per recommender turn that carries at least one
/// recommendation and has a nonempty prefix before it.
pub fn split_eval_instances(corpus: &[Conversation]) -> Vec<EvalInstance> {
    let mut instances = Vec::new();
    for c in corpus {
        let mut by_turn: BTreeMap<usize, BTreeSet<ItemId>> = BTreeMap::new();
        for r in &c.recommendations {
            by_turn.entry(r.turn).or_default().insert(r.item);
        }
        for (&turn, items) in &by_turn {
            if turn == 0 || c.turns[turn].speaker != Speaker::Recommender {
                continue;
            }
            let mut prior = Vec::new();
            for r in c.recommendations.iter().filter(|r| r.turn < turn) {
                if !prior.contains(&r.item) {
                    prior.push(r.item);
                }
            }
            instances.push(EvalInstance {
                conversation: c.id,
                conversation_key: c.key.clone(),
                turn,
                history: History {
                    turns: c.turns[..turn].to_vec(),
                    mentions: c.mentions.iter().filter(|m| m.turn < turn).copied().collect(),
                },
                prior_recommendations: prior,
                ground_truth: items.clone(),
            });
        }
    }
    instances
}

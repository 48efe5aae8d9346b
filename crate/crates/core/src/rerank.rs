//! Prompt construction, LLM reranking, and grounding of the model's answer
//! in the retrieved candidate set.
//!
//! The system message carries the instructions; the user message has three
//! sections in fixed order: conversation history, retrieved example
//! conversations, numbered item candidates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, ConversationId, History, Speaker};
use crate::error::{Error, Result};
use crate::kg::{ItemId, KnowledgeGraph};
use crate::linker::EntityLinker;
use crate::llm::{ChatClient, ChatMessage, ChatRequest};

pub const HISTORY_HEADER: &str = "## Conversation history";
pub const EXAMPLES_HEADER: &str = "## Conversation examples";
pub const CANDIDATES_HEADER: &str = "## Item candidates";

/// Instruction template. Original wording written for this project.
pub const INSTRUCTIONS: &str = "\
You are a movie recommender taking part in a conversation with a user.
Read the conversation history and work out what the user wants, including preferences they only imply.
The conversation examples are past conversations that ended in recommendations the user accepted; use them as patterns.
Rank the item candidates from most to least suitable for the user. Only use titles from the candidate list, copied exactly.

Answer in this format:
RANKING:
1. <candidate title>
2. <candidate title>
...
REASONING:
<one paragraph explaining the user's preferences and your ranking>";

const ATTRIBUTE_VALUES_PER_RELATION: usize = 3;
const OMITTED_TURNS_MARKER: &str = "[earlier turns omitted]";

/// Rough token count used for budget accounting: one token per four chars.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub max_prompt_tokens: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            max_prompt_tokens: 16_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExampleBlock {
    pub conversation: ConversationId,
    pub text: String,
    /// Leading turns removed to fit the budget.
    pub omitted_turns: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TokenUsage {
    pub instructions: usize,
    pub history: usize,
    pub examples: usize,
    pub candidates: usize,
    pub total: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub instructions: String,
    pub history_block: String,
    pub example_blocks: Vec<ExampleBlock>,
    /// Candidates in retrieval order, after any budget trimming.
    pub candidates: Vec<ItemId>,
    pub candidate_lines: Vec<String>,
    /// Candidates removed from the tail to fit the budget.
    pub dropped_candidates: usize,
    pub tokens: TokenUsage,
}

impl PromptBundle {
    pub fn user_message(&self) -> String {
        render_user(&self.history_block, &self.example_blocks, &self.candidate_lines)
    }

    pub fn request(&self, model: &str, temperature: f64, max_tokens: u32) -> ChatRequest {
        ChatRequest {
            model: model.to_string(),
            messages: vec![
                ChatMessage::system(self.instructions.clone()),
                ChatMessage::user(self.user_message()),
            ],
            temperature,
            max_tokens,
        }
    }
}

fn render_user(history: &str, examples: &[ExampleBlock], candidate_lines: &[String]) -> String {
    let mut out = String::new();
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    out.push_str(history);
    out.push_str("\n\n");
    out.push_str(EXAMPLES_HEADER);
    out.push('\n');
    if examples.is_empty() {
        out.push_str("(none)\n");
    }
    for (i, e) in examples.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&e.text);
    }
    out.push('\n');
    out.push_str(CANDIDATES_HEADER);
    out.push('\n');
    for line in candidate_lines {
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn render_turns<'a>(turns: impl Iterator<Item = (Speaker, &'a str)>) -> String {
    let mut out = String::new();
    for (speaker, text) in turns {
        out.push_str(speaker.label());
        out.push_str(": ");
        out.push_str(&text.split_whitespace().collect::<Vec<_>>().join(" "));
        out.push('\n');
    }
    out
}

pub fn render_history(history: &History) -> String {
    let text = render_turns(history.turns.iter().map(|t| (t.speaker, t.text.as_str())));
    text.trim_end().to_string()
}

fn render_example(index: usize, conversation: &Conversation, kg: &KnowledgeGraph, skip: usize) -> String {
    let mut out = format!("### Example {} (conversation {})\n", index + 1, conversation.key);
    if skip > 0 {
        out.push_str(OMITTED_TURNS_MARKER);
        out.push('\n');
    }
    out.push_str(&render_turns(
        conversation
            .turns
            .iter()
            .skip(skip)
            .map(|t| (t.speaker, t.text.as_str())),
    ));
    let mut accepted: Vec<&str> = Vec::new();
    for item in conversation.accepted_items() {
        let name = kg.entity(item).name.as_str();
        if !accepted.contains(&name) {
            accepted.push(name);
        }
    }
    out.push_str("Successful recommendations: ");
    out.push_str(
        if accepted.is_empty() {
            "(none)".into()
        } else {
            accepted.join("; ")
        }
        .as_str(),
    );
    out.push('\n');
    out
}

/// `N. Title | relation: value, value; ...`
pub fn render_candidate(number: usize, item: ItemId, kg: &KnowledgeGraph) -> String {
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (label, other) in kg.relations_of(item) {
        let values = groups.entry(label).or_default();
        let name = kg.entity(other).name.as_str();
        if values.len() < ATTRIBUTE_VALUES_PER_RELATION && !values.contains(&name) {
            values.push(name);
        }
    }
    let mut line = format!("{number}. {}", kg.entity(item).name);
    if !groups.is_empty() {
        let attrs: Vec<String> = groups.iter().map(|(l, v)| format!("{l}: {}", v.join(", "))).collect();
        line.push_str(" | ");
        line.push_str(&attrs.join("; "));
    }
    line
}

/// Renders the prompt. Examples lose their oldest turns first when the budget
/// is exceeded; candidates are dropped from the tail only once every example
/// is reduced to its recommendation line.
pub fn build_prompt(
    history: &History,
    examples: &[&Conversation],
    candidates: &[ItemId],
    kg: &KnowledgeGraph,
    config: &PromptConfig,
) -> Result<PromptBundle> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("prompt needs at least one candidate".into()));
    }
    let budget = config.max_prompt_tokens;
    let history_block = render_history(history);
    let candidate_lines: Vec<String> = candidates
        .iter()
        .enumerate()
        .map(|(i, &item)| render_candidate(i + 1, item, kg))
        .collect();
    let mut skips = vec![0usize; examples.len()];
    let render_examples = |skips: &[usize]| -> Vec<ExampleBlock> {
        examples
            .iter()
            .zip(skips)
            .enumerate()
            .map(|(i, (c, &skip))| ExampleBlock {
                conversation: c.id,
                text: render_example(i, c, kg, skip),
                omitted_turns: skip,
            })
            .collect()
    };
    let total = |blocks: &[ExampleBlock], lines: &[String]| {
        estimate_tokens(INSTRUCTIONS) + estimate_tokens(&render_user(&history_block, blocks, lines))
    };

    let mut blocks = render_examples(&skips);
    let mut n_candidates = candidate_lines.len();
    // Trim the examples, oldest turns first, taking turns round-robin from
    // the longest remaining example.
    while total(&blocks, &candidate_lines[..n_candidates]) > budget {
        let next = (0..examples.len())
            .filter(|&i| skips[i] < examples[i].turns.len())
            .max_by_key(|&i| (examples[i].turns.len() - skips[i], std::cmp::Reverse(i)));
        match next {
            Some(i) => {
                skips[i] += 1;
                blocks = render_examples(&skips);
            }
            None => break,
        }
    }
    while total(&blocks, &candidate_lines[..n_candidates]) > budget && n_candidates > 1 {
        n_candidates -= 1;
    }
    let used = total(&blocks, &candidate_lines[..n_candidates]);
    if used > budget {
        return Err(Error::PromptBudget { budget, required: used });
    }
    let candidate_lines: Vec<String> = candidate_lines[..n_candidates].to_vec();
    let tokens = TokenUsage {
        instructions: estimate_tokens(INSTRUCTIONS),
        history: estimate_tokens(&history_block),
        examples: blocks.iter().map(|b| estimate_tokens(&b.text)).sum(),
        candidates: candidate_lines.iter().map(|l| estimate_tokens(l)).sum(),
        total: used,
        budget,
    };
    Ok(PromptBundle {
        instructions: INSTRUCTIONS.to_string(),
        history_block,
        example_blocks: blocks,
        candidates: candidates[..n_candidates].to_vec(),
        candidate_lines,
        dropped_candidates: candidates.len() - n_candidates,
        tokens,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedResponse {
    /// Ranked lines with list markers removed.
    pub ranking: Vec<String>,
    pub reasoning: String,
}

fn strip_list_marker(line: &str) -> Option<&str> {
    let t = line.trim();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
        return Some(rest.trim());
    }
    t.strip_prefix("- ").or_else(|| t.strip_prefix("* ")).map(str::trim)
}

fn clean_title(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| matches!(c, '*' | '"' | '\'' | '`' | '“' | '”'))
        .trim()
        .to_string()
}

fn marker(line: &str, name: &str) -> Option<String> {
    let t = line.trim().trim_matches('*').trim();
    let upper = t.to_ascii_uppercase();
    upper.starts_with(name).then(|| {
        t[name.len()..]
            .trim_start_matches('*')
            .trim_start_matches(':')
            .trim_start_matches('*')
            .trim()
            .to_string()
    })
}

/// Parses `RANKING:` / `REASONING:` output. Without a `RANKING:` marker every
/// numbered or bulleted line before `REASONING:` is taken as a ranked title.
pub fn parse_response(raw: &str) -> ParsedResponse {
    enum Section {
        Preamble,
        Ranking,
        Reasoning,
    }
    let mut section = Section::Preamble;
    let mut saw_ranking_marker = false;
    let mut parsed = ParsedResponse::default();
    let mut reasoning = Vec::new();
    let mut loose = Vec::new();
    for line in raw.lines() {
        if line.trim_start().starts_with("```") {
            continue;
        }
        if let Some(rest) = marker(line, "RANKING") {
            section = Section::Ranking;
            saw_ranking_marker = true;
            if let Some(title) = strip_list_marker(&rest) {
                parsed.ranking.push(clean_title(title));
            }
            continue;
        }
        if let Some(rest) = marker(line, "REASONING") {
            section = Section::Reasoning;
            if !rest.is_empty() {
                reasoning.push(rest);
            }
            continue;
        }
        match section {
            Section::Ranking => {
                if let Some(title) = strip_list_marker(line) {
                    parsed.ranking.push(clean_title(title));
                } else if !line.trim().is_empty() {
                    parsed.ranking.push(clean_title(line));
                }
            }
            Section::Reasoning => reasoning.push(line.trim().to_string()),
            Section::Preamble => match strip_list_marker(line) {
                Some(title) => parsed.ranking.push(clean_title(title)),
                None => loose.push(line.trim().to_string()),
            },
        }
    }
    if !saw_ranking_marker && reasoning.is_empty() {
        reasoning = loose;
    }
    parsed.ranking.retain(|t| !t.is_empty());
    parsed.reasoning = reasoning.join("\n").trim().to_string();
    parsed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub match_threshold: f64,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            match_threshold: 0.85,
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecommendationResult {
    /// Grounded items in the model's order, then the remaining candidates in
    /// retrieval order.
    pub ranked_items: Vec<ItemId>,
    /// Length of the model-ordered prefix of `ranked_items`.
    pub grounded: usize,
    pub reasoning: String,
    pub raw_response: String,
    /// Lines the model produced that matched no candidate.
    pub ungrounded: Vec<String>,
    /// Set when nothing in the response could be grounded.
    pub fallback: bool,
}

impl RecommendationResult {
    /// Result that keeps the retrieval order untouched.
    pub fn retrieval_order(candidates: &[ItemId], raw_response: String, reasoning: String) -> Self {
        Self {
            ranked_items: candidates.to_vec(),
            grounded: 0,
            reasoning,
            raw_response,
            ungrounded: Vec::new(),
            fallback: true,
        }
    }
}

fn ground_line(line: &str, linker: &EntityLinker, threshold: f64, candidates: &[ItemId]) -> Option<ItemId> {
    if let Some(m) = linker.match_title_among(line, threshold, candidates) {
        return Some(m.item);
    }
    // Drop a trailing explanation such as "Title - because ..." or a copied
    // attribute list after " | ".
    for sep in [" | ", " - ", " – ", " — ", ": "] {
        if let Some((head, _)) = line.split_once(sep) {
            if let Some(m) = linker.match_title_among(head, threshold, candidates) {
                return Some(m.item);
            }
        }
    }
    None
}

/// Grounds a raw model response against the prompt's candidates.
pub fn ground_response(
    raw: &str,
    candidates: &[ItemId],
    linker: &EntityLinker,
    threshold: f64,
) -> RecommendationResult {
    let parsed = parse_response(raw);
    let mut ranked: Vec<ItemId> = Vec::new();
    let mut ungrounded = Vec::new();
    for line in &parsed.ranking {
        match ground_line(line, linker, threshold, candidates) {
            Some(item) if !ranked.contains(&item) => ranked.push(item),
            Some(_) => {}
            None => ungrounded.push(line.clone()),
        }
    }
    let grounded = ranked.len();
    for &c in candidates {
        if !ranked.contains(&c) {
            ranked.push(c);
        }
    }
    RecommendationResult {
        ranked_items: ranked,
        grounded,
        reasoning: parsed.reasoning,
        raw_response: raw.to_string(),
        ungrounded,
        fallback: grounded == 0,
    }
}

/// Asks the model to rerank the prompt's candidates.
pub fn rerank(
    prompt: &PromptBundle,
    client: &dyn ChatClient,
    linker: &EntityLinker,
    config: &RerankConfig,
) -> Result<RecommendationResult> {
    let request = prompt.request(client.model_id(), config.temperature, config.max_output_tokens);
    let raw = client.complete(&request)?;
    let result = ground_response(&raw, &prompt.candidates, linker, config.match_threshold);
    if result.fallback {
        tracing::warn!("model response named no candidate; keeping retrieval order");
    }
    debug_assert!(is_grounded(&result.ranked_items, &prompt.candidates));
    Ok(result)
}

/// True when `ranked` is a duplicate-free subset of `candidates`.
pub fn is_grounded(ranked: &[ItemId], candidates: &[ItemId]) -> bool {
    let mut seen = std::collections::HashSet::new();
    ranked.len() <= candidates.len() && ranked.iter().all(|i| candidates.contains(i) && seen.insert(*i))
}

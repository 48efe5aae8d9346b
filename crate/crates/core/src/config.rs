//! Engine configuration, read from TOML. Every section and key is optional;
//! missing values take their defaults.
//!
//! ```toml
//! ablation = "none"            # none | no-reasoner | no-ppr | no-icl | bm25
//!
//! [index]
//! w_mention = 1.0
//! w_cooc = 1.0
//! w_rec = 2.0
//! w_kg = 1.0
//! mention_cap = 3
//! min_cooc = 2
//!
//! [linker]
//! link_threshold = 0.90
//! match_threshold = 0.85
//! extractor = "dictionary"     # dictionary | llm
//!
//! [reasoner]
//! kind = "statistical"         # statistical | embedding
//! budget = 50
//!
//! [retrieval]
//! alpha = 0.15
//! top_k_items = 100
//! top_n_conversations = 3
//!
//! [llm]
//! model = "gpt-4o-2024-08-06"
//! api_base_url = "https://api.openai.com/v1"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bm25::Bm25Config;
use crate::error::{Error, Result};
use crate::index::IndexConfig;
use crate::linker::LinkerConfig;
use crate::llm::cache::hex;
use crate::ppr::PprConfig;
use crate::reasoner::StatisticalWeights;
use crate::rerank::{PromptConfig, RerankConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Expansion budget forced to zero.
    NoReasoner,
    /// Items ranked by reasoner score; conversations by seed indicator.
    NoPpr,
    /// No example conversations in the prompt.
    NoIcl,
    /// BM25 over conversation text replaces graph retrieval.
    Bm25,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-reasoner" => Ok(Ablation::NoReasoner),
            "no-ppr" => Ok(Ablation::NoPpr),
            "no-icl" => Ok(Ablation::NoIcl),
            "bm25" => Ok(Ablation::Bm25),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoReasoner => "no-reasoner",
            Ablation::NoPpr => "no-ppr",
            Ablation::NoIcl => "no-icl",
            Ablation::Bm25 => "bm25",
        }
    }

    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoReasoner,
        Ablation::NoPpr,
        Ablation::NoIcl,
        Ablation::Bm25,
    ];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasonerKind {
    #[default]
    Statistical,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerConfig {
    pub kind: ReasonerKind,
    /// Maximum number of expanded entities.
    pub budget: usize,
    #[serde(flatten)]
    pub weights: StatisticalWeights,
    pub embedding_path: Option<PathBuf>,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            kind: ReasonerKind::Statistical,
            budget: 50,
            weights: StatisticalWeights::default(),
            embedding_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    #[serde(flatten)]
    pub ppr: PprConfig,
    pub top_k_items: usize,
    pub top_n_conversations: usize,
    /// Drop items already recommended earlier in the conversation.
    pub exclude_prior: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            ppr: PprConfig::default(),
            top_k_items: 100,
            top_n_conversations: 3,
            exclude_prior: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub model: String,
    pub api_base_url: String,
    /// Environment variable holding the API credential.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_prompt_tokens: usize,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o-2024-08-06".into(),
            api_base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            max_prompt_tokens: PromptConfig::default().max_prompt_tokens,
            retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            max_in_flight: 4,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![10, 50] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    /// Sessions are written here on shutdown and read back on start.
    pub snapshot_path: Option<PathBuf>,
    /// Leading items of each response recorded as already recommended and
    /// excluded from later turns of the session.
    pub remember_top: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            snapshot_path: None,
            remember_top: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub ablation: Ablation,
    pub index: IndexConfig,
    pub linker: LinkerConfig,
    pub reasoner: ReasonerConfig,
    pub retrieval: RetrievalConfig,
    pub llm: LlmConfig,
    pub bm25: Bm25Config,
    pub eval: EvalConfig,
    pub server: ServerConfig,
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.index.validate()?;
        self.retrieval
            .ppr
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.linker.link_threshold) || !unit(self.linker.match_threshold) {
            return Err(Error::Config("linker thresholds must lie in (0, 1]".into()));
        }
        if self.retrieval.top_k_items == 0 {
            return Err(Error::Config("top_k_items must be at least 1".into()));
        }
        if self.reasoner.kind == ReasonerKind::Embedding && self.reasoner.embedding_path.is_none() {
            return Err(Error::Config("embedding reasoner needs reasoner.embedding_path".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be nonempty positive cutoffs".into()));
        }
        Ok(())
    }

    /// Budget after the ablation is applied.
    pub fn effective_reasoner_budget(&self) -> usize {
        match self.ablation {
            Ablation::NoReasoner => 0,
            _ => self.reasoner.budget,
        }
    }

    /// Example count after the ablation is applied.
    pub fn effective_top_n(&self) -> usize {
        match self.ablation {
            Ablation::NoIcl => 0,
            _ => self.retrieval.top_n_conversations,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn prompt(&self) -> PromptConfig {
        PromptConfig {
            max_prompt_tokens: self.llm.max_prompt_tokens,
        }
    }

    pub fn rerank(&self) -> RerankConfig {
        RerankConfig {
            match_threshold: self.linker.match_threshold,
            temperature: self.llm.temperature,
            max_output_tokens: self.llm.max_output_tokens,
        }
    }

    /// Stable digest of every setting, after ablation overrides.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.effective()).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    /// The configuration actually in force: ablation overrides applied.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.reasoner.budget = self.effective_reasoner_budget();
        c.retrieval.top_n_conversations = self.effective_top_n();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = EngineConfig::from_toml("").unwrap();
        assert_eq!(c, EngineConfig::default());
        assert_eq!(c.retrieval.top_k_items, 100);
        assert_eq!(c.retrieval.top_n_conversations, 3);
        assert_eq!(c.reasoner.budget, 50);
        assert_eq!(c.retrieval.ppr.alpha, 0.15);
        assert_eq!(c.index.w_rec, 2.0);
    }

    #[test]
    fn sections_override_defaults() {
        let c = EngineConfig::from_toml(
            "ablation = \"no-icl\"\n[retrieval]\nalpha = 0.3\ntop_k_items = 20\n[reasoner]\nbudget = 5\nw_two_hop = 0.0\n[index]\nmention_cap = 1\n",
        )
        .unwrap();
        assert_eq!(c.ablation, Ablation::NoIcl);
        assert_eq!(c.retrieval.ppr.alpha, 0.3);
        assert_eq!(c.retrieval.top_k_items, 20);
        assert_eq!(c.reasoner.budget, 5);
        assert_eq!(c.reasoner.weights.w_two_hop, 0.0);
        assert_eq!(c.index.mention_cap, Some(1));
        assert_eq!(c.effective_top_n(), 0);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(EngineConfig::from_toml("[retrieval]\nalpha = 1.5\n").is_err());
        assert!(EngineConfig::from_toml("[linker]\nlink_threshold = 0\n").is_err());
        assert!(EngineConfig::from_toml("unknown = 1\n").is_err());
        assert!(EngineConfig::from_toml("ablation = \"w/o everything\"\n").is_err());
    }

    #[test]
    fn fingerprint_tracks_effective_settings() {
        let base = EngineConfig::default();
        let no_icl = base.clone().with_ablation(Ablation::NoIcl);
        assert_ne!(base.fingerprint(), no_icl.fingerprint());
        assert_eq!(base.fingerprint(), EngineConfig::default().fingerprint());
        assert_eq!(no_icl.effective().retrieval.top_n_conversations, 0);
    }
}

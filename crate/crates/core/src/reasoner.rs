//! Entity expansion: from the entities mentioned in a conversation to related
//! entities that seed retrieval alongside them.
//!
//! The default [`StatisticalReasoner`] scores a candidate entity `e` against
//! each mentioned entity `s` and sums over `s`:
//!
//! ```text
//! w_kg    · A(s,e) / deg(s)                 direct catalog relation
//! w_pmi   · max(0, ln(co(s,e)·N / (df(s)·df(e))))   co-mention in the corpus
//! w_2hop  · q / (1 + q),  q = Σ_m A(s,m)·A(m,e)     length-2 catalog paths
//! ```
//!
//! Every term is non-decreasing in the edge weights incident to the pair, so
//! adding a catalog edge between a seed and `e` never lowers `e`'s score.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Index;
use crate::kg::{EntityId, KnowledgeGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredEntity {
    pub entity: EntityId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mentioned,
    Expanded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Seed {
    pub entity: EntityId,
    pub provenance: Provenance,
    /// Reasoner score for expanded entities.
    pub score: Option<f64>,
}

/// Mentioned entities first, in mention order, then expansions by score.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SeedSet {
    seeds: Vec<Seed>,
}

impl SeedSet {
    pub fn seeds(&self) -> &[Seed] {
        &self.seeds
    }

    pub fn entities(&self) -> Vec<EntityId> {
        self.seeds.iter().map(|s| s.entity).collect()
    }

    pub fn mentioned(&self) -> Vec<EntityId> {
        self.with(Provenance::Mentioned)
    }

    pub fn expanded(&self) -> Vec<EntityId> {
        self.with(Provenance::Expanded)
    }

    fn with(&self, provenance: Provenance) -> Vec<EntityId> {
        self.seeds
            .iter()
            .filter(|s| s.provenance == provenance)
            .map(|s| s.entity)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn contains(&self, entity: EntityId) -> bool {
        self.seeds.iter().any(|s| s.entity == entity)
    }
}

/// Union of mentioned and expanded entities with provenance. Duplicates are
/// kept once, at their first position.
pub fn make_seed_set(mentioned: &[EntityId], expanded: &[ScoredEntity]) -> SeedSet {
    let mut seeds: Vec<Seed> = Vec::with_capacity(mentioned.len() + expanded.len());
    for &entity in mentioned {
        if !seeds.iter().any(|s| s.entity == entity) {
            seeds.push(Seed {
                entity,
                provenance: Provenance::Mentioned,
                score: None,
            });
        }
    }
    for e in expanded {
        if !seeds.iter().any(|s| s.entity == e.entity) {
            seeds.push(Seed {
                entity: e.entity,
                provenance: Provenance::Expanded,
                score: Some(e.score),
            });
        }
    }
    SeedSet { seeds }
}

/// Pluggable expansion. Implementations must be deterministic functions of
/// their inputs.
pub trait EntityReasoner: Send + Sync {
    fn name(&self) -> &'static str;

    /// At most `budget` entities outside `mentioned`, best first.
    fn expand(&self, mentioned: &[EntityId], index: &Index, budget: usize) -> Vec<ScoredEntity>;
}

/// Keeps positive scores outside `exclude` and returns the best `budget`,
/// ties by lower id.
fn top_scores(
    scores: impl IntoIterator<Item = (EntityId, f64)>,
    exclude: &[EntityId],
    budget: usize,
) -> Vec<ScoredEntity> {
    if budget == 0 {
        return Vec::new();
    }
    let mut ranked: Vec<ScoredEntity> = scores
        .into_iter()
        .filter(|(e, s)| *s > 0.0 && s.is_finite() && !exclude.contains(e))
        .map(|(entity, score)| ScoredEntity { entity, score })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entity.cmp(&b.entity)));
    ranked.truncate(budget);
    ranked
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatisticalWeights {
    pub w_kg: f64,
    pub w_pmi: f64,
    pub w_two_hop: f64,
    /// Path-length cutoff: 1 disables the two-hop term.
    pub max_hops: u32,
}

impl Default for StatisticalWeights {
    fn default() -> Self {
        Self {
            w_kg: 1.0,
            w_pmi: 1.0,
            w_two_hop: 0.5,
            max_hops: 2,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StatisticalReasoner {
    pub weights: StatisticalWeights,
}

impl StatisticalReasoner {
    pub fn new(weights: StatisticalWeights) -> Self {
        Self { weights }
    }

    /// Score of every entity with a nonzero contribution, before excluding
    /// the mentioned entities.
    pub fn scores(&self, mentioned: &[EntityId], index: &Index) -> BTreeMap<EntityId, f64> {
        let w = self.weights;
        let adj = index.kg.adjacency();
        let n_conv = index.frequency.cols() as f64;
        let mut total: BTreeMap<EntityId, f64> = BTreeMap::new();
        let mut seen = Vec::with_capacity(mentioned.len());
        for &s in mentioned {
            if seen.contains(&s) || s.index() >= index.kg.entity_count() {
                continue;
            }
            seen.push(s);
            let si = s.index();
            let deg = adj.weighted_degree(si);
            if deg > 0.0 && w.w_kg != 0.0 {
                for (e, a, _) in adj.row(si) {
                    *total.entry(EntityId(e as u32)).or_insert(0.0) += w.w_kg * a / deg;
                }
            }
            if w.w_two_hop != 0.0 && w.max_hops >= 2 {
                let mut paths: HashMap<usize, f64> = HashMap::new();
                for (m, a_sm, _) in adj.row(si) {
                    for (e, a_me, _) in adj.row(m) {
                        if e != si {
                            *paths.entry(e).or_insert(0.0) += a_sm * a_me;
                        }
                    }
                }
                for (e, q) in paths {
                    *total.entry(EntityId(e as u32)).or_insert(0.0) += w.w_two_hop * q / (1.0 + q);
                }
            }
            if w.w_pmi != 0.0 {
                let convs = index.conversations_mentioning(s);
                let df_s = convs.len() as f64;
                let mut co: HashMap<EntityId, u32> = HashMap::new();
                for &c in convs {
                    for (e, _) in index.frequency.column(crate::corpus::ConversationId(c)) {
                        if e != s {
                            *co.entry(e).or_insert(0) += 1;
                        }
                    }
                }
                for (e, count) in co {
                    let df_e = index.conversations_mentioning(e).len() as f64;
                    let pmi = (count as f64 * n_conv / (df_s * df_e)).ln();
                    if pmi > 0.0 {
                        *total.entry(e).or_insert(0.0) += w.w_pmi * pmi;
                    }
                }
            }
        }
        total
    }
}

impl EntityReasoner for StatisticalReasoner {
    fn name(&self) -> &'static str {
        "statistical"
    }

    fn expand(&self, mentioned: &[EntityId], index: &Index, budget: usize) -> Vec<ScoredEntity> {
        if mentioned.is_empty() || budget == 0 {
            return Vec::new();
        }
        top_scores(self.scores(mentioned, index), mentioned, budget)
    }
}

/// Scores entities by mean inner product with the mentioned entities'
/// vectors, loaded from an externally produced embedding file.
#[derive(Debug, Clone)]
pub struct EmbeddingReasoner {
    dim: usize,
    vectors: Vec<Option<Vec<f64>>>,
}

impl EmbeddingReasoner {
    /// File format: header `<entity count> <dim>`, then one line per entity:
    /// `<entity id> v1 ... v_dim`, ids as written in the catalog file.
    pub fn load(path: impl AsRef<Path>, kg: &KnowledgeGraph) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, kg)
    }

    pub fn parse(text: &str, source: &Path, kg: &KnowledgeGraph) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str| s.parse::<usize>().ok();
        let (Some(count), Some(dim)) = (
            head.first().and_then(|s| parse_usize(s)),
            head.get(1).and_then(|s| parse_usize(s)),
        ) else {
            return Err(err(1, "header must be `<entity count> <dim>`".into()));
        };
        if head.len() != 2 || dim == 0 {
            return Err(err(1, "header must be `<entity count> <dim>`".into()));
        }
        let mut vectors = vec![None; kg.entity_count()];
        let mut rows = 0;
        for (idx, line) in lines {
            let mut fields = line.split_whitespace();
            let key = fields.next().expect("nonempty line");
            let values: Vec<f64> = fields
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| err(idx + 1, format!("bad value {v:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(err(idx + 1, format!("expected {dim} values, found {}", values.len())));
            }
            let entity = kg
                .by_key(key)
                .ok_or_else(|| err(idx + 1, format!("unknown entity id {key:?}")))?;
            vectors[entity.index()] = Some(values);
            rows += 1;
        }
        if rows != count {
            return Err(err(1, format!("header declares {count} rows, file has {rows}")));
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl EntityReasoner for EmbeddingReasoner {
    fn name(&self) -> &'static str {
        "embedding"
    }

    fn expand(&self, mentioned: &[EntityId], _index: &Index, budget: usize) -> Vec<ScoredEntity> {
        let seeds: Vec<&Vec<f64>> = mentioned
            .iter()
            .filter_map(|e| self.vectors.get(e.index()).and_then(Option::as_ref))
            .collect();
        if seeds.is_empty() || budget == 0 {
            return Vec::new();
        }
        let scores = self.vectors.iter().enumerate().filter_map(|(i, v)| {
            let v = v.as_ref()?;
            let mean = seeds
                .iter()
                .map(|s| s.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
                / seeds.len() as f64;
            Some((EntityId(i as u32), mean))
        });
        top_scores(scores, mentioned, budget)
    }
}

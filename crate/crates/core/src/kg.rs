//! Knowledge graph catalog: entities, relation labels, triples, and the
//! undirected adjacency derived from them.
//!
//! File format, one record per line (tab separated, `#` starts a comment):
//!
//! ```text
//! E <id> <item|attribute> <canonical name> <alias1|alias2|...>
//! T <head id> <relation label> <tail id>
//! ```
//!
//! Dense handles are assigned with items first, so the item catalog is always
//! the index range `0..item_count`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, SymmetricBuilder};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct EntityId(pub u32);

/// Items are entities in the prefix range `0..item_count`.
pub type ItemId = EntityId;

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Item,
    Attribute,
}

impl EntityKind {
    fn as_str(self) -> &'static str {
        match self {
            EntityKind::Item => "item",
            EntityKind::Attribute => "attribute",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    /// Identifier used in the source file.
    pub key: String,
    pub kind: EntityKind,
    pub name: String,
    pub aliases: Vec<String>,
    /// Release year parsed from a trailing year token of the name.
    pub year: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: u32,
    pub tail: EntityId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgOptions {
    /// Weight adjacency by the number of triple lines joining a pair instead
    /// of collapsing them to 1.
    #[serde(default)]
    pub multiplicity_weights: bool,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    item_count: usize,
    relations: Vec<String>,
    triples: Vec<Triple>,
    multiplicity: Vec<u32>,
    adjacency: CsrMatrix,
    incident: Vec<Vec<u32>>,
    by_key: HashMap<String, EntityId>,
    by_name: HashMap<String, Vec<EntityId>>,
    options: KgOptions,
}

struct RawEntity {
    line: usize,
    key: String,
    kind: EntityKind,
    name: String,
    aliases: Vec<String>,
}

struct RawTriple {
    line: usize,
    head: String,
    relation: String,
    tail: String,
}

pub fn load_kg(path: impl AsRef<Path>, options: KgOptions) -> Result<KnowledgeGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KnowledgeGraph::parse(&text, path, options)
}

impl KnowledgeGraph {
    pub fn parse(text: &str, source: impl AsRef<Path>, options: KgOptions) -> Result<Self> {
        let source = source.as_ref();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            message,
        };

        let mut raw_entities = Vec::new();
        let mut raw_triples = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            match fields[0] {
                "E" => {
                    if !(4..=5).contains(&fields.len()) {
                        return Err(parse_err(
                            line_no,
                            format!("entity line needs 4 or 5 fields, found {}", fields.len()),
                        ));
                    }
                    let kind = match fields[2] {
                        "item" => EntityKind::Item,
                        "attribute" => EntityKind::Attribute,
                        other => return Err(parse_err(line_no, format!("unknown entity kind {other:?}"))),
                    };
                    let key = fields[1].trim();
                    let name = fields[3].trim();
                    if key.is_empty() {
                        return Err(parse_err(line_no, "empty entity id".into()));
                    }
                    if text::normalize(name).is_empty() {
                        return Err(parse_err(
                            line_no,
                            format!("entity name {name:?} has no word characters"),
                        ));
                    }
                    let aliases = fields
                        .get(4)
                        .map(|a| {
                            a.split('|')
                                .map(str::trim)
                                .filter(|s| !s.is_empty())
                                .map(String::from)
                                .collect()
                        })
                        .unwrap_or_default();
                    raw_entities.push(RawEntity {
                        line: line_no,
                        key: key.to_string(),
                        kind,
                        name: name.to_string(),
                        aliases,
                    });
                }
                "T" => {
                    if fields.len() != 4 {
                        return Err(parse_err(
                            line_no,
                            format!("triple line needs 4 fields, found {}", fields.len()),
                        ));
                    }
                    raw_triples.push(RawTriple {
                        line: line_no,
                        head: fields[1].trim().to_string(),
                        relation: fields[2].trim().to_string(),
                        tail: fields[3].trim().to_string(),
                    });
                }
                other => {
                    return Err(parse_err(line_no, format!("unknown record type {other:?}")));
                }
            }
        }

        // Items first, each kind in file order.
        raw_entities.sort_by_key(|e| e.kind != EntityKind::Item);
        let mut by_key = HashMap::new();
        let mut seen_names: HashMap<(String, Vec<String>), usize> = HashMap::new();
        let mut entities = Vec::with_capacity(raw_entities.len());
        for (i, raw) in raw_entities.into_iter().enumerate() {
            let id = EntityId(i as u32);
            if by_key.insert(raw.key.clone(), id).is_some() {
                return Err(parse_err(raw.line, format!("duplicate entity id {:?}", raw.key)));
            }
            let mut alias_keys: Vec<String> = raw.aliases.iter().map(|a| text::normalize(a)).collect();
            alias_keys.sort();
            alias_keys.dedup();
            if let Some(prev) = seen_names.insert((text::normalize(&raw.name), alias_keys), raw.line) {
                return Err(parse_err(
                    raw.line,
                    format!(
                        "entity name {:?} duplicates line {prev} without a distinguishing alias",
                        raw.name
                    ),
                ));
            }
            let name_tokens: Vec<String> = text::tokenize(&raw.name).into_iter().map(|t| t.text).collect();
            let year = text::split_trailing_year(&name_tokens).1;
            entities.push(Entity {
                id,
                key: raw.key,
                kind: raw.kind,
                name: raw.name,
                aliases: raw.aliases,
                year,
            });
        }
        let item_count = entities.iter().take_while(|e| e.kind == EntityKind::Item).count();

        let mut relations: Vec<String> = Vec::new();
        let mut relation_ids: HashMap<String, u32> = HashMap::new();
        let mut counts: BTreeMap<Triple, u32> = BTreeMap::new();
        let mut order: Vec<Triple> = Vec::new();
        for raw in raw_triples {
            let resolve = |key: &str| {
                by_key
                    .get(key)
                    .copied()
                    .ok_or_else(|| parse_err(raw.line, format!("triple references unknown entity {key:?}")))
            };
            let head = resolve(&raw.head)?;
            let tail = resolve(&raw.tail)?;
            if head == tail {
                return Err(parse_err(raw.line, format!("self-loop triple on {:?}", raw.head)));
            }
            if raw.relation.is_empty() {
                return Err(parse_err(raw.line, "empty relation label".into()));
            }
            let relation = *relation_ids.entry(raw.relation.clone()).or_insert_with(|| {
                relations.push(raw.relation.clone());
                (relations.len() - 1) as u32
            });
            let triple = Triple { head, relation, tail };
            let count = counts.entry(triple).or_insert(0);
            if *count == 0 {
                order.push(triple);
            }
            *count += 1;
        }
        let multiplicity = order.iter().map(|t| counts[t]).collect();

        Self::assemble(entities, item_count, relations, order, multiplicity, by_key, options)
    }

    fn assemble(
        entities: Vec<Entity>,
        item_count: usize,
        relations: Vec<String>,
        triples: Vec<Triple>,
        multiplicity: Vec<u32>,
        by_key: HashMap<String, EntityId>,
        options: KgOptions,
    ) -> Result<Self> {
        let n = entities.len();
        let mut pair_weight: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut incident = vec![Vec::new(); n];
        for (k, (t, &m)) in triples.iter().zip(&multiplicity).enumerate() {
            let key = (t.head.0.min(t.tail.0), t.head.0.max(t.tail.0));
            *pair_weight.entry(key).or_insert(0) += m;
            incident[t.head.index()].push(k as u32);
            incident[t.tail.index()].push(k as u32);
        }
        let mut builder = SymmetricBuilder::new(n);
        for (&(a, b), &count) in &pair_weight {
            let w = if options.multiplicity_weights {
                count as f64
            } else {
                1.0
            };
            builder.add(a as usize, b as usize, w, 0);
        }
        let adjacency = builder.build();

        let mut by_name: HashMap<String, Vec<EntityId>> = HashMap::new();
        for e in &entities {
            by_name.entry(text::normalize(&e.name)).or_default().push(e.id);
        }
        for e in &entities {
            for alias in &e.aliases {
                let ids = by_name.entry(text::normalize(alias)).or_default();
                if !ids.contains(&e.id) {
                    ids.push(e.id);
                }
            }
        }

        Ok(Self {
            entities,
            item_count,
            relations,
            triples,
            multiplicity,
            adjacency,
            incident,
            by_key,
            by_name,
            options,
        })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id.index()]
    }

    pub fn get(&self, id: EntityId) -> Option<&Entity> {
        self.entities.get(id.index())
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn is_item(&self, id: EntityId) -> bool {
        id.index() < self.item_count
    }

    pub fn items(&self) -> impl Iterator<Item = &Entity> {
        self.entities[..self.item_count].iter()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Number of source lines that produced each entry of [`Self::triples`].
    pub fn multiplicity(&self) -> &[u32] {
        &self.multiplicity
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn options(&self) -> KgOptions {
        self.options
    }

    pub fn by_key(&self, key: &str) -> Option<EntityId> {
        self.by_key.get(key).copied()
    }

    /// Resolves a reference by source id, then by exact normalized name or
    /// alias (lowest id on ambiguity).
    pub fn resolve(&self, reference: &str) -> Option<EntityId> {
        self.by_key(reference.trim()).or_else(|| {
            self.by_name
                .get(&text::normalize(reference))
                .and_then(|ids| ids.iter().min().copied())
        })
    }

    /// `(relation label, other endpoint)` for every triple touching `id`,
    /// in file order.
    pub fn relations_of(&self, id: EntityId) -> impl Iterator<Item = (&str, EntityId)> + '_ {
        self.incident[id.index()].iter().map(move |&k| {
            let t = &self.triples[k as usize];
            let other = if t.head == id { t.tail } else { t.head };
            (self.relations[t.relation as usize].as_str(), other)
        })
    }

    /// Serializes back to the line format. Loading the output reproduces the
    /// same entity list and triple multiset.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entities {
            let _ = writeln!(
                out,
                "E\t{}\t{}\t{}\t{}",
                e.key,
                e.kind.as_str(),
                e.name,
                e.aliases.join("|")
            );
        }
        for (t, &m) in self.triples.iter().zip(&self.multiplicity) {
            for _ in 0..m {
                let _ = writeln!(
                    out,
                    "T\t{}\t{}\t{}",
                    self.entities[t.head.index()].key,
                    self.relations[t.relation as usize],
                    self.entities[t.tail.index()].key
                );
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let max_item = self.entities[..self.item_count].iter().map(|e| e.id).max();
        let min_attr = self.entities[self.item_count..].iter().map(|e| e.id).min();
        if let (Some(a), Some(b)) = (max_item, min_attr) {
            if a >= b {
                return Err(Error::Validation("items do not form an id prefix".into()));
            }
        }
        if self.entities[self.item_count..]
            .iter()
            .any(|e| e.kind == EntityKind::Item)
        {
            return Err(Error::Validation("item entity outside the item prefix".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.triples {
            if t.head == t.tail {
                return Err(Error::Validation("self-loop triple".into()));
            }
            if !seen.insert(*t) {
                return Err(Error::Validation("duplicate triple".into()));
            }
        }
        if !self.adjacency.is_symmetric() || self.adjacency.values().iter().any(|&w| w <= 0.0) {
            return Err(Error::Validation("adjacency is not symmetric and positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<KnowledgeGraph> {
        KnowledgeGraph::parse(text, "test.tsv", KgOptions::default())
    }

    const SMALL: &str = "\
# tiny catalog
E\ta1\tattribute\tMel Gibson\tGibson
E\tm1\titem\tBraveheart (1995)\t
E\tm2\titem\tThe Patriot (2000)
T\tm1\tstarring\ta1
T\tm2\tstarring\ta1
";

    #[test]
    fn three_entities_two_triples() {
        let kg = parse(SMALL).unwrap();
        assert_eq!(kg.entity_count(), 3);
        assert_eq!(kg.item_count(), 2);
        assert_eq!(kg.adjacency().nnz(), 4);
        assert_eq!(kg.entity(EntityId(0)).name, "Braveheart (1995)");
        assert_eq!(kg.entity(EntityId(0)).year, Some(1995));
        assert_eq!(kg.entity(EntityId(2)).kind, EntityKind::Attribute);
        kg.validate().unwrap();
    }

    #[test]
    fn edgeless_graph_loads() {
        let text = (0..5)
            .map(|i| format!("E\tx{i}\tattribute\tThing {i}\n"))
            .collect::<String>();
        let kg = parse(&text).unwrap();
        assert_eq!(kg.entity_count(), 5);
        assert_eq!(kg.adjacency().nnz(), 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("E\ta\titem\tA\nT\ta\tbad\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_entity_in_triple() {
        let err = parse("E\ta\titem\tA\nT\ta\trel\tzzz\n").unwrap_err();
        assert!(err.to_string().contains("zzz"), "{err}");
    }

    #[test]
    fn duplicate_name_needs_distinguishing_alias() {
        assert!(parse("E\ta\titem\tCrash\nE\tb\titem\tCrash\n").is_err());
        let kg = parse("E\ta\titem\tCrash\tCrash 1996\nE\tb\titem\tCrash\tCrash 2004\n").unwrap();
        assert_eq!(kg.entity_count(), 2);
    }

    #[test]
    fn self_loops_rejected() {
        assert!(parse("E\ta\titem\tA\nT\ta\trel\ta\n").is_err());
    }

    #[test]
    fn duplicate_triples_collapse_unless_multiplicity() {
        let text = "E\ta\titem\tA\nE\tb\tattribute\tB\nT\ta\tr\tb\nT\ta\tr\tb\nT\tb\ts\ta\n";
        let kg = parse(text).unwrap();
        assert_eq!(kg.triples().len(), 2);
        assert_eq!(kg.adjacency().get(0, 1), Some(1.0));
        let weighted = KnowledgeGraph::parse(
            text,
            "t",
            KgOptions {
                multiplicity_weights: true,
            },
        )
        .unwrap();
        assert_eq!(weighted.adjacency().get(1, 0), Some(3.0));
    }

    #[test]
    fn resolve_by_key_name_and_alias() {
        let kg = parse(SMALL).unwrap();
        assert_eq!(kg.resolve("a1"), Some(EntityId(2)));
        assert_eq!(kg.resolve("braveheart 1995"), Some(EntityId(0)));
        assert_eq!(kg.resolve("GIBSON"), Some(EntityId(2)));
        assert_eq!(kg.resolve("nobody"), None);
        let rels: Vec<_> = kg.relations_of(EntityId(2)).collect();
        assert_eq!(rels, [("starring", EntityId(0)), ("starring", EntityId(1))]);
    }

    #[test]
    fn text_round_trip() {
        let text = format!("{SMALL}T\tm1\tstarring\ta1\n");
        let kg = parse(&text).unwrap();
        let again = parse(&kg.to_text()).unwrap();
        assert_eq!(kg.entities(), again.entities());
        assert_eq!(kg.triples(), again.triples());
        assert_eq!(kg.multiplicity(), again.multiplicity());
    }
}

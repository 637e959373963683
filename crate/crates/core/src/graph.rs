//! Knowledge-graph model of what a dialogue talks about.
//!
//! Entities are identified by `(type, name)` after case folding and
//! whitespace collapsing; relations by `(source, target, description)`.
//! All set operations work on those identity keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ExtractionError, GraphError};

/// Case-folds and collapses internal whitespace.
pub fn normalize_name(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityKey {
    pub entity_type: String,
    pub name: String,
}

impl EntityKey {
    pub fn new(entity_type: &str, name: &str) -> Self {
        EntityKey {
            entity_type: normalize_name(entity_type),
            name: normalize_name(name),
        }
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity_type, self.name)
    }
}

impl Serialize for EntityKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (&self.entity_type, &self.name).serialize(s)
    }
}

impl<'de> Deserialize<'de> for EntityKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (t, n) = <(String, String)>::deserialize(d)?;
        Ok(EntityKey::new(&t, &n))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    #[serde(rename = "type")]
    pub entity_type: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub aliases: BTreeSet<String>,
}

impl Entity {
    pub fn new(entity_type: impl Into<String>, name: impl Into<String>) -> Self {
        Entity {
            name: name.into(),
            entity_type: entity_type.into(),
            description: String::new(),
            aliases: BTreeSet::new(),
        }
    }

    pub fn described(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn key(&self) -> EntityKey {
        EntityKey::new(&self.entity_type, &self.name)
    }

    /// Normalized name plus normalized aliases.
    pub fn surface_forms(&self) -> BTreeSet<String> {
        std::iter::once(&self.name)
            .chain(self.aliases.iter())
            .map(|s| normalize_name(s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationKey {
    pub source: EntityKey,
    pub target: EntityKey,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub source: EntityKey,
    pub target: EntityKey,
    #[serde(default)]
    pub description: String,
}

impl Relation {
    pub fn new(source: EntityKey, target: EntityKey, description: impl Into<String>) -> Self {
        Relation {
            source,
            target,
            description: description.into(),
        }
    }

    pub fn key(&self) -> RelationKey {
        RelationKey {
            source: self.source.clone(),
            target: self.target.clone(),
            description: normalize_name(&self.description),
        }
    }
}

/// A surface form claimed by two distinct entities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasCollision {
    pub surface: String,
    pub entities: (EntityKey, EntityKey),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InfoGraph {
    entities: BTreeMap<EntityKey, Entity>,
    relations: BTreeMap<RelationKey, Relation>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
}

impl Serialize for InfoGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GraphRepr {
            entities: self.entities.values().cloned().collect(),
            relations: self.relations.values().cloned().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for InfoGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = GraphRepr::deserialize(d)?;
        let mut g = InfoGraph::new();
        for e in repr.entities {
            g.insert_entity(e);
        }
        for r in repr.relations {
            g.relations.insert(r.key(), r);
        }
        Ok(g)
    }
}

impl InfoGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entities(entities: impl IntoIterator<Item = Entity>) -> Self {
        let mut g = InfoGraph::new();
        for e in entities {
            g.insert_entity(e);
        }
        g
    }

    /// Inserts an entity, merging aliases into an existing entry with the same key.
    pub fn insert_entity(&mut self, entity: Entity) -> EntityKey {
        let key = entity.key();
        match self.entities.get_mut(&key) {
            Some(existing) => {
                existing.aliases.extend(entity.aliases);
                if existing.description.is_empty() {
                    existing.description = entity.description;
                }
            }
            None => {
                self.entities.insert(key.clone(), entity);
            }
        }
        key
    }

    pub fn add_entity(&mut self, entity: Entity) -> Result<EntityKey, GraphError> {
        if entity.name.trim().is_empty() {
            return Err(GraphError::EmptyName);
        }
        Ok(self.insert_entity(entity))
    }

    /// Adds a relation whose endpoints must already be entities of the graph.
    pub fn add_relation(&mut self, relation: Relation) -> Result<(), GraphError> {
        for end in [&relation.source, &relation.target] {
            if !self.entities.contains_key(end) {
                return Err(GraphError::DanglingEndpoint(end.clone()));
            }
        }
        self.relations.insert(relation.key(), relation);
        Ok(())
    }

    pub fn add_alias(&mut self, key: &EntityKey, alias: &str) -> bool {
        match self.entities.get_mut(key) {
            Some(e) => {
                if normalize_name(&e.name) != normalize_name(alias) {
                    e.aliases.insert(alias.to_string());
                }
                true
            }
            None => false,
        }
    }

    pub fn entity(&self, key: &EntityKey) -> Option<&Entity> {
        self.entities.get(key)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn entity_keys(&self) -> impl Iterator<Item = &EntityKey> {
        self.entities.keys()
    }

    pub fn relation_keys(&self) -> impl Iterator<Item = &RelationKey> {
        self.relations.keys()
    }

    pub fn contains_entity(&self, key: &EntityKey) -> bool {
        self.entities.contains_key(key)
    }

    pub fn contains_relation(&self, key: &RelationKey) -> bool {
        self.relations.contains_key(key)
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    /// Entities whose name or alias matches the surface form, any type.
    pub fn find_by_surface(&self, surface: &str) -> Vec<&EntityKey> {
        let wanted = normalize_name(surface);
        self.entities
            .iter()
            .filter(|(_, e)| e.surface_forms().contains(&wanted))
            .map(|(k, _)| k)
            .collect()
    }

    /// Relations whose endpoints are not entities of this graph.
    pub fn dangling(&self) -> Vec<GraphError> {
        self.relations
            .values()
            .flat_map(|r| [&r.source, &r.target])
            .filter(|k| !self.entities.contains_key(*k))
            .map(|k| GraphError::DanglingEndpoint(k.clone()))
            .collect()
    }

    pub fn alias_collisions(&self) -> Vec<AliasCollision> {
        let mut owner: BTreeMap<String, &EntityKey> = BTreeMap::new();
        let mut out = Vec::new();
        for (key, e) in &self.entities {
            for surface in e.surface_forms() {
                match owner.get(&surface) {
                    Some(other) if *other != key => out.push(AliasCollision {
                        surface: surface.clone(),
                        entities: ((*other).clone(), key.clone()),
                    }),
                    Some(_) => {}
                    None => {
                        owner.insert(surface, key);
                    }
                }
            }
        }
        out
    }

    /// Subgraph induced by the given entity keys plus relations among them.
    pub fn restrict_to(&self, keys: &BTreeSet<EntityKey>) -> InfoGraph {
        InfoGraph {
            entities: self
                .entities
                .iter()
                .filter(|(k, _)| keys.contains(*k))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
            relations: self
                .relations
                .iter()
                .filter(|(_, r)| keys.contains(&r.source) && keys.contains(&r.target))
                .map(|(k, r)| (k.clone(), r.clone()))
                .collect(),
        }
    }

    pub(crate) fn insert_relation_unchecked(&mut self, relation: Relation) {
        self.relations.insert(relation.key(), relation);
    }
}

/// Result of a union: the merged graph plus any alias collisions that need
/// canonicalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphUnion {
    pub graph: InfoGraph,
    pub collisions: Vec<AliasCollision>,
}

impl GraphUnion {
    pub fn into_graph(self) -> InfoGraph {
        self.graph
    }
}

pub fn graph_union(a: &InfoGraph, b: &InfoGraph) -> GraphUnion {
    let mut graph = a.clone();
    merge_into(&mut graph, b);
    let collisions = graph.alias_collisions();
    GraphUnion { graph, collisions }
}

/// In-place union without the collision scan.
pub fn merge_into(target: &mut InfoGraph, other: &InfoGraph) {
    for e in other.entities.values() {
        target.insert_entity(e.clone());
    }
    for (k, r) in &other.relations {
        target.relations.entry(k.clone()).or_insert_with(|| r.clone());
    }
}

/// Entities and relations of `full` that are absent from `partial`.
pub fn graph_difference(full: &InfoGraph, partial: &InfoGraph) -> InfoGraph {
    InfoGraph {
        entities: full
            .entities
            .iter()
            .filter(|(k, _)| !partial.entities.contains_key(*k))
            .map(|(k, e)| (k.clone(), e.clone()))
            .collect(),
        relations: full
            .relations
            .iter()
            .filter(|(k, _)| !partial.relations.contains_key(*k))
            .map(|(k, r)| (k.clone(), r.clone()))
            .collect(),
    }
}

pub fn is_subgraph(needle: &InfoGraph, haystack: &InfoGraph) -> bool {
    needle.entities.keys().all(|k| haystack.entities.contains_key(k))
        && needle.relations.keys().all(|k| haystack.relations.contains_key(k))
}

/// Prefix unions of per-round graphs in perturbed order.
#[derive(Debug, Clone)]
pub struct ContextAccumulator {
    per_round: Vec<InfoGraph>,
    prefixes: Vec<InfoGraph>,
}

impl ContextAccumulator {
    pub fn new(per_round: Vec<InfoGraph>) -> Self {
        let mut prefixes = Vec::with_capacity(per_round.len() + 1);
        let mut acc = InfoGraph::new();
        prefixes.push(acc.clone());
        for g in &per_round {
            merge_into(&mut acc, g);
            prefixes.push(acc.clone());
        }
        ContextAccumulator { per_round, prefixes }
    }

    pub fn rounds(&self) -> usize {
        self.per_round.len()
    }

    pub fn round_graph(&self, round: usize) -> &InfoGraph {
        &self.per_round[round - 1]
    }

    /// Union of the graphs of rounds strictly before `round` (1-based).
    /// `round` may be one past the last round.
    pub fn context_before(&self, round: usize) -> &InfoGraph {
        let idx = round.saturating_sub(1).min(self.per_round.len());
        &self.prefixes[idx]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum CanonicalDecision {
    AliasOf { entity: EntityKey },
    GroupOf { entities: Vec<EntityKey> },
    NewEntity { entity: Entity },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "keys", rename_all = "snake_case")]
pub enum CanonicalizationResult {
    AliasOf(EntityKey),
    GroupOf(Vec<EntityKey>),
    NewEntity(EntityKey),
}

impl CanonicalizationResult {
    pub fn keys(&self) -> Vec<EntityKey> {
        match self {
            CanonicalizationResult::AliasOf(k) | CanonicalizationResult::NewEntity(k) => vec![k.clone()],
            CanonicalizationResult::GroupOf(ks) => ks.clone(),
        }
    }
}

/// Decides what an unexpected entity mention refers to.
pub trait Canonicalizer {
    fn decide(&self, candidate: &Entity, graph: &InfoGraph) -> Result<CanonicalDecision, ExtractionError>;
}

/// Resolves a candidate mention against the graph, updating aliases or
/// inserting a new entity as decided.
pub fn canonicalize_entity(
    candidate: &Entity,
    graph: &mut InfoGraph,
    resolver: &dyn Canonicalizer,
) -> Result<CanonicalizationResult, ExtractionError> {
    let key = candidate.key();
    if graph.contains_entity(&key) {
        return Ok(CanonicalizationResult::AliasOf(key));
    }
    if let [only] = graph.find_by_surface(&candidate.name).as_slice() {
        return Ok(CanonicalizationResult::AliasOf((*only).clone()));
    }
    let misaligned = |detail: String| ExtractionError::Misaligned {
        function: crate::extract::PipelineFunction::Canonicalization,
        detail,
    };
    match resolver.decide(candidate, graph)? {
        CanonicalDecision::AliasOf { entity } => {
            if !graph.add_alias(&entity, &candidate.name) {
                return Err(misaligned(format!("alias target {entity} is not in the graph")));
            }
            Ok(CanonicalizationResult::AliasOf(entity))
        }
        CanonicalDecision::GroupOf { entities } => {
            if entities.is_empty() {
                return Err(misaligned("empty group".into()));
            }
            if let Some(missing) = entities.iter().find(|k| !graph.contains_entity(k)) {
                return Err(misaligned(format!("group member {missing} is not in the graph")));
            }
            Ok(CanonicalizationResult::GroupOf(entities))
        }
        CanonicalDecision::NewEntity { entity } => {
            let key = graph
                .add_entity(entity)
                .map_err(|e| misaligned(e.to_string()))?;
            Ok(CanonicalizationResult::NewEntity(key))
        }
    }
}

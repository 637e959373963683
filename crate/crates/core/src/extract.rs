//! LLM-backed information extraction.
//!
//! Seven pipeline functions turn a dialogue into a knowledge graph plus the
//! per-round subgraphs the answerability check needs. Every function renders a
//! prompt template, asks for JSON, validates the reply, and on failure sends
//! exactly one repair request carrying the validator's message. A second
//! failure marks the extraction misaligned. Validated replies are cached by
//! `sha256(template name, rendered prompt, model)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::chat::{ChatBackend, ChatMessage, ChatRequest};
use crate::dialogue::Dialogue;
use crate::error::{ConfigError, ExtractionError};
use crate::graph::{
    canonicalize_entity, is_subgraph, normalize_name, CanonicalDecision, CanonicalizationResult, Canonicalizer, Entity,
    EntityKey, InfoGraph, Relation, RelationKey,
};
use crate::scoring::normalize_answer;

const SYSTEM_PROMPT: &str =
    "You are a careful information extraction assistant. Follow the instructions exactly and reply with a single JSON object and nothing else.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineFunction {
    Declaratives,
    Decontextualize,
    Topic,
    EntityTypes,
    Graph,
    RoundGraph,
    Canonicalization,
}

impl PipelineFunction {
    pub const ALL: [PipelineFunction; 7] = [
        PipelineFunction::Declaratives,
        PipelineFunction::Decontextualize,
        PipelineFunction::Topic,
        PipelineFunction::EntityTypes,
        PipelineFunction::Graph,
        PipelineFunction::RoundGraph,
        PipelineFunction::Canonicalization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelineFunction::Declaratives => "declaratives",
            PipelineFunction::Decontextualize => "decontextualize",
            PipelineFunction::Topic => "topic",
            PipelineFunction::EntityTypes => "entity_types",
            PipelineFunction::Graph => "graph",
            PipelineFunction::RoundGraph => "round_graph",
            PipelineFunction::Canonicalization => "canonicalization",
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            PipelineFunction::Declaratives => include_str!("../templates/declaratives.txt"),
            PipelineFunction::Decontextualize => include_str!("../templates/decontextualize.txt"),
            PipelineFunction::Topic => include_str!("../templates/topic.txt"),
            PipelineFunction::EntityTypes => include_str!("../templates/entity_types.txt"),
            PipelineFunction::Graph => include_str!("../templates/graph.txt"),
            PipelineFunction::RoundGraph => include_str!("../templates/round_graph.txt"),
            PipelineFunction::Canonicalization => include_str!("../templates/canonicalization.txt"),
        }
    }

    /// JSON schema of the reply, quoted back to the model in repair requests.
    pub fn output_schema(self) -> Value {
        let strings = json!({"type": "array", "items": {"type": "string"}});
        let selection = json!({"type": "object", "required": ["entities", "relations"],
            "properties": {"entities": strings, "relations": {"type": "array", "items": {"type": "integer"}}}});
        match self {
            PipelineFunction::Declaratives => json!({"type": "object", "required": ["declaratives"],
                "properties": {"declaratives": strings}}),
            PipelineFunction::Decontextualize => json!({"type": "object", "required": ["rounds"],
                "properties": {"rounds": {"type": "array", "items": {"type": "object", "required": ["question", "answer"],
                    "properties": {"question": {"type": "string"}, "answer": {"type": "string"}}}}}}),
            PipelineFunction::Topic => json!({"type": "object", "required": ["topic"],
                "properties": {"topic": {"type": "string"}}}),
            PipelineFunction::EntityTypes => json!({"type": "object", "required": ["entity_types"],
                "properties": {"entity_types": strings}}),
            PipelineFunction::Graph => json!({"type": "object", "required": ["entities", "relations"],
                "properties": {
                    "entities": {"type": "array", "items": {"type": "object", "required": ["name", "type"],
                        "properties": {"name": {"type": "string"}, "type": {"type": "string"}, "description": {"type": "string"}}}},
                    "relations": {"type": "array", "items": {"type": "object", "required": ["source", "target"],
                        "properties": {"source": {"type": "string"}, "target": {"type": "string"}, "description": {"type": "string"}}}}}}),
            PipelineFunction::RoundGraph => json!({"type": "object", "required": ["rounds"],
                "properties": {"rounds": {"type": "array", "items": {"type": "object",
                    "required": ["question", "full_question", "answer"],
                    "properties": {"question": selection, "full_question": selection, "answer": selection}}}}}),
            PipelineFunction::Canonicalization => json!({"type": "object", "required": ["result"],
                "properties": {"result": {"enum": ["alias", "group", "new"]}, "entity": {"type": "string"},
                    "entities": strings, "name": {"type": "string"}, "type": {"type": "string"}}}),
        }
    }
}

impl fmt::Display for PipelineFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub function: PipelineFunction,
    pub body: String,
}

impl PromptTemplate {
    /// Substitutes `{name}` placeholders; `{{` and `}}` are literal braces.
    pub fn render(&self, bindings: &[(&str, String)]) -> Result<String, ConfigError> {
        let body = &self.body;
        let bytes = body.as_bytes();
        let mut out = String::with_capacity(body.len());
        let mut i = 0;
        let syntax = |offset| ConfigError::TemplateSyntax {
            template: self.function.name().to_string(),
            offset,
        };
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    out.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    out.push('}');
                    i += 2;
                }
                b'{' => {
                    let end = body[i + 1..].find('}').map(|e| i + 1 + e).ok_or_else(|| syntax(i))?;
                    let name = &body[i + 1..end];
                    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                        return Err(syntax(i));
                    }
                    let value = bindings
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| v)
                        .ok_or_else(|| ConfigError::UnboundPlaceholder {
                            template: self.function.name().to_string(),
                            placeholder: name.to_string(),
                        })?;
                    out.push_str(value);
                    i = end + 1;
                }
                b'}' => return Err(syntax(i)),
                _ => {
                    let ch = body[i..].chars().next().unwrap_or_default();
                    out.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<PipelineFunction, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: PipelineFunction::ALL
                .iter()
                .map(|f| {
                    (
                        *f,
                        PromptTemplate {
                            function: *f,
                            body: f.default_body().to_string(),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl TemplateSet {
    /// Loads `<function>.txt` for every pipeline function from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, ConfigError> {
        let mut templates = BTreeMap::new();
        for f in PipelineFunction::ALL {
            let path = dir.join(format!("{}.txt", f.name()));
            if !path.exists() {
                return Err(ConfigError::MissingTemplate(path.display().to_string()));
            }
            templates.insert(
                f,
                PromptTemplate {
                    function: f,
                    body: std::fs::read_to_string(&path)?,
                },
            );
        }
        Ok(TemplateSet { templates })
    }

    pub fn get(&self, f: PipelineFunction) -> &PromptTemplate {
        &self.templates[&f]
    }

    /// Short content hash identifying the template set.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        for t in self.templates.values() {
            h.update(t.function.name().as_bytes());
            h.update([0]);
            h.update(t.body.as_bytes());
            h.update([0]);
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Validated replies keyed by request hash, optionally mirrored to disk.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, String>>,
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            entries: RwLock::new(HashMap::new()),
            dir: Some(dir),
        })
    }

    pub fn key(function: PipelineFunction, prompt: &str, model: &str) -> String {
        let mut h = Sha256::new();
        h.update(function.name().as_bytes());
        h.update([0]);
        h.update(prompt.as_bytes());
        h.update([0]);
        h.update(model.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.entries.read().ok().and_then(|e| e.get(key).cloned()) {
            return Some(v);
        }
        let path = self.dir.as_ref()?.join(format!("{key}.txt"));
        let v = std::fs::read_to_string(path).ok()?;
        if let Ok(mut e) = self.entries.write() {
            e.insert(key.to_string(), v.clone());
        }
        Some(v)
    }

    pub fn put(&self, key: &str, value: &str) {
        if let Some(dir) = &self.dir {
            if let Err(e) = std::fs::write(dir.join(format!("{key}.txt")), value) {
                log::warn!("cache write failed: {e}");
            }
        }
        if let Ok(mut e) = self.entries.write() {
            e.insert(key.to_string(), value.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.entries.read().map(|e| e.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts the JSON object out of a reply that may carry code fences or chatter.
fn json_payload(raw: &str) -> &str {
    let start = raw.find('{');
    let end = raw.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if s < e => &raw[s..=e],
        _ => raw.trim(),
    }
}

fn parse_json<T: DeserializeOwned>(raw: &str) -> Result<T, String> {
    serde_json::from_str(json_payload(raw)).map_err(|e| format!("reply is not valid JSON for the schema: {e}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Declarative {
    pub text: String,
    /// The round's answer carries no information (e.g. "unknown").
    #[serde(default)]
    pub low_information: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullRound {
    pub question: String,
    pub answer: String,
}

/// Subgraphs of one round: the question as written (`G_r`), the
/// decontextualized question (`G_r̄`) and the gold answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundGraphs {
    pub question: InfoGraph,
    pub full_question: InfoGraph,
    pub answer: InfoGraph,
}

impl RoundGraphs {
    /// What this round contributes to the context of later rounds.
    pub fn explicit(&self) -> InfoGraph {
        crate::graph::graph_union(&self.question, &self.answer).into_graph()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisalignedRound {
    pub index: usize,
    pub detail: String,
}

/// Everything extracted from one seed dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueAnalysis {
    pub dialogue_id: String,
    pub declaratives: Vec<Declarative>,
    pub full_rounds: Vec<FullRound>,
    pub topic: String,
    pub entity_types: Vec<String>,
    pub whole: InfoGraph,
    pub rounds: Vec<RoundGraphs>,
    #[serde(default)]
    pub misaligned: Vec<MisalignedRound>,
}

impl DialogueAnalysis {
    pub fn is_aligned(&self) -> bool {
        self.misaligned.is_empty()
    }

    /// Round graphs by 1-based original index.
    pub fn round(&self, index: usize) -> Option<&RoundGraphs> {
        index.checked_sub(1).and_then(|i| self.rounds.get(i))
    }
}

fn is_low_information(answer: &str) -> bool {
    matches!(normalize_answer(answer).as_str(), "" | "unknown")
}

fn render_dialogue(d: &Dialogue) -> String {
    d.rounds
        .iter()
        .map(|r| format!("Round {}\nQuestion: {}\nAnswer: {}", r.index, r.question, r.gold_answer))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_entities<'a>(entities: impl Iterator<Item = &'a Entity>) -> String {
    entities
        .map(|e| {
            if e.description.is_empty() {
                format!("- {} ({})", e.name, e.entity_type)
            } else {
                format!("- {} ({}): {}", e.name, e.entity_type, e.description)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn display_name(graph: &InfoGraph, key: &EntityKey) -> String {
    graph.entity(key).map(|e| e.name.clone()).unwrap_or_else(|| key.name.clone())
}

#[derive(Deserialize)]
struct DeclarativesOut {
    declaratives: Vec<String>,
}

#[derive(Deserialize)]
struct DecontextOut {
    rounds: Vec<FullRound>,
}

#[derive(Deserialize)]
struct TopicOut {
    topic: String,
}

#[derive(Deserialize)]
struct TypesOut {
    entity_types: Vec<String>,
}

#[derive(Deserialize)]
struct GraphEntityOut {
    name: String,
    #[serde(rename = "type")]
    entity_type: String,
    #[serde(default)]
    description: String,
}

#[derive(Deserialize)]
struct GraphRelationOut {
    source: String,
    target: String,
    #[serde(default)]
    description: String,
}

#[derive(Deserialize)]
struct GraphOut {
    entities: Vec<GraphEntityOut>,
    #[serde(default)]
    relations: Vec<GraphRelationOut>,
}

#[derive(Deserialize, Default)]
struct SelectionOut {
    #[serde(default)]
    entities: Vec<String>,
    #[serde(default)]
    relations: Vec<usize>,
}

#[derive(Deserialize)]
struct RoundSelectionOut {
    question: SelectionOut,
    full_question: SelectionOut,
    #[serde(default)]
    answer: SelectionOut,
}

#[derive(Deserialize)]
struct RoundGraphOut {
    rounds: Vec<RoundSelectionOut>,
}

#[derive(Deserialize)]
#[serde(tag = "result", rename_all = "lowercase")]
enum CanonOut {
    Alias {
        entity: String,
    },
    Group {
        entities: Vec<String>,
    },
    New {
        name: String,
        #[serde(rename = "type")]
        entity_type: String,
    },
}

/// The pipeline over one chat backend.
pub struct Extractor {
    backend: Arc<dyn ChatBackend>,
    templates: TemplateSet,
    cache: ResponseCache,
    requests: AtomicUsize,
}

impl Extractor {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Extractor {
            backend,
            templates: TemplateSet::default(),
            cache: ResponseCache::in_memory(),
            requests: AtomicUsize::new(0),
        }
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn backend(&self) -> &dyn ChatBackend {
        self.backend.as_ref()
    }

    /// Backend requests issued by this extractor, including repairs.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn ask(&self, function: PipelineFunction, messages: Vec<ChatMessage>) -> Result<String, ExtractionError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.backend
            .complete(&ChatRequest {
                purpose: function.name().to_string(),
                messages,
            })
            .map_err(|source| ExtractionError::Transport { function, source })
    }

    fn call<T>(
        &self,
        function: PipelineFunction,
        bindings: &[(&str, String)],
        validate: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ExtractionError> {
        let prompt = self.templates.get(function).render(bindings)?;
        let key = ResponseCache::key(function, &prompt, &self.backend.model_name());
        if let Some(hit) = self.cache.get(&key) {
            if let Ok(v) = validate(&hit) {
                return Ok(v);
            }
        }
        let mut messages = vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(prompt)];
        let first = self.ask(function, messages.clone())?;
        let problem = match validate(&first) {
            Ok(v) => {
                self.cache.put(&key, &first);
                return Ok(v);
            }
            Err(problem) => problem,
        };
        log::debug!("{function}: invalid reply, requesting repair: {problem}");
        messages.push(ChatMessage::assistant(first));
        messages.push(ChatMessage::user(format!(
            "Your reply was rejected: {problem}\nReply again with corrected JSON only, matching this schema:\n{}",
            function.output_schema()
        )));
        let second = self.ask(function, messages)?;
        match validate(&second) {
            Ok(v) => {
                self.cache.put(&key, &second);
                Ok(v)
            }
            Err(detail) => Err(ExtractionError::Misaligned { function, detail }),
        }
    }

    /// One declarative sentence per round, in round order.
    pub fn extract_declaratives(&self, d: &Dialogue) -> Result<Vec<Declarative>, ExtractionError> {
        let n = d.len();
        let texts = self.call(
            PipelineFunction::Declaratives,
            &[("dialogue", render_dialogue(d)), ("round_count", n.to_string())],
            |raw| {
                let out: DeclarativesOut = parse_json(raw)?;
                if out.declaratives.len() != n {
                    return Err(format!("expected {n} declaratives, got {}", out.declaratives.len()));
                }
                if let Some(i) = out.declaratives.iter().position(|s| s.trim().is_empty()) {
                    return Err(format!("declarative {} is empty", i + 1));
                }
                Ok(out.declaratives)
            },
        )?;
        Ok(texts
            .into_iter()
            .zip(&d.rounds)
            .map(|(text, r)| Declarative {
                text,
                low_information: is_low_information(&r.gold_answer),
            })
            .collect())
    }

    /// Self-contained rewrite of every question and answer.
    pub fn decontextualize(&self, d: &Dialogue) -> Result<Vec<FullRound>, ExtractionError> {
        let n = d.len();
        self.call(
            PipelineFunction::Decontextualize,
            &[("dialogue", render_dialogue(d)), ("round_count", n.to_string())],
            |raw| {
                let out: DecontextOut = parse_json(raw)?;
                if out.rounds.len() != n {
                    return Err(format!("expected {n} rounds, got {}", out.rounds.len()));
                }
                if let Some(i) = out.rounds.iter().position(|r| r.question.trim().is_empty()) {
                    return Err(format!("full question {} is empty", i + 1));
                }
                Ok(out.rounds)
            },
        )
    }

    pub fn extract_topic(&self, document: &str) -> Result<String, ExtractionError> {
        if document.trim().is_empty() {
            return Err(ExtractionError::Precondition {
                function: PipelineFunction::Topic,
                detail: "document is empty".into(),
            });
        }
        self.call(PipelineFunction::Topic, &[("document", document.to_string())], |raw| {
            let out: TopicOut = parse_json(raw)?;
            if out.topic.trim().is_empty() {
                return Err("topic is empty".into());
            }
            Ok(out.topic.trim().to_string())
        })
    }

    /// Deduplicated (case-insensitively) entity type labels.
    pub fn extract_entity_types(&self, declaratives: &[String], topic: &str) -> Result<Vec<String>, ExtractionError> {
        if declaratives.is_empty() {
            return Err(ExtractionError::Precondition {
                function: PipelineFunction::EntityTypes,
                detail: "no declarative sentences".into(),
            });
        }
        self.call(
            PipelineFunction::EntityTypes,
            &[("topic", topic.to_string()), ("declaratives", declaratives.join("\n"))],
            |raw| {
                let out: TypesOut = parse_json(raw)?;
                let mut seen = BTreeSet::new();
                let types: Vec<String> = out
                    .entity_types
                    .into_iter()
                    .map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty() && seen.insert(normalize_name(t)))
                    .collect();
                if types.is_empty() {
                    return Err("entity type list is empty".into());
                }
                Ok(types)
            },
        )
    }

    /// Whole-document graph. Entities with unlisted types and relation
    /// endpoints that name no extracted entity go through canonicalization.
    pub fn extract_graph(&self, topic: &str, document: &str, entity_types: &[String]) -> Result<InfoGraph, ExtractionError> {
        let out = self.call(
            PipelineFunction::Graph,
            &[
                ("topic", topic.to_string()),
                ("document", document.to_string()),
                ("entity_types", entity_types.join(", ")),
            ],
            |raw| {
                let out: GraphOut = parse_json(raw)?;
                if let Some(e) = out.entities.iter().find(|e| e.name.trim().is_empty()) {
                    return Err(format!("entity with empty name (type {})", e.entity_type));
                }
                Ok(out)
            },
        )?;
        let listed: BTreeSet<String> = entity_types.iter().map(|t| normalize_name(t)).collect();
        let mut graph = InfoGraph::new();
        let mut unlisted = Vec::new();
        for e in out.entities {
            let entity = Entity::new(e.entity_type, e.name).described(e.description);
            if listed.contains(&normalize_name(&entity.entity_type)) {
                graph.insert_entity(entity);
            } else {
                unlisted.push(entity);
            }
        }
        let resolver = LlmCanonicalizer {
            extractor: self,
            entity_types,
        };
        for entity in unlisted {
            canonicalize_entity(&entity, &mut graph, &resolver)?;
        }
        for r in out.relations {
            let sources = self.resolve_mention(&r.source, &mut graph, &resolver)?;
            let targets = self.resolve_mention(&r.target, &mut graph, &resolver)?;
            for s in &sources {
                for t in &targets {
                    graph.insert_relation_unchecked(Relation::new(s.clone(), t.clone(), r.description.clone()));
                }
            }
        }
        Ok(graph)
    }

    fn resolve_mention(
        &self,
        name: &str,
        graph: &mut InfoGraph,
        resolver: &dyn Canonicalizer,
    ) -> Result<Vec<EntityKey>, ExtractionError> {
        if let [only] = graph.find_by_surface(name).as_slice() {
            return Ok(vec![(*only).clone()]);
        }
        let candidate = Entity::new("unknown", name);
        Ok(canonicalize_entity(&candidate, graph, resolver)?.keys())
    }

    /// Per-round subgraphs chosen from the whole graph. Mentions that name no
    /// known entity are canonicalized, which may grow `whole`.
    pub fn extract_round_graphs(
        &self,
        whole: &mut InfoGraph,
        d: &Dialogue,
        full_rounds: &[FullRound],
        entity_types: &[String],
    ) -> Result<Vec<RoundGraphs>, ExtractionError> {
        let n = d.len();
        if full_rounds.len() != n {
            return Err(ExtractionError::Precondition {
                function: PipelineFunction::RoundGraph,
                detail: format!("{} decontextualized rounds for {n} rounds", full_rounds.len()),
            });
        }
        let relations: Vec<Relation> = whole.relations().cloned().collect();
        let relation_listing = relations
            .iter()
            .enumerate()
            .map(|(i, r)| {
                format!(
                    "{i}. {} -> {}: {}",
                    display_name(whole, &r.source),
                    display_name(whole, &r.target),
                    r.description
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let dialogue = d
            .rounds
            .iter()
            .zip(full_rounds)
            .map(|(r, f)| {
                format!(
                    "Round {}\nQuestion: {}\nFull question: {}\nAnswer: {}",
                    r.index, r.question, f.question, r.gold_answer
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let relation_count = relations.len();
        let out = self.call(
            PipelineFunction::RoundGraph,
            &[
                ("entities", render_entities(whole.entities())),
                ("relations", if relation_listing.is_empty() { "(none)".into() } else { relation_listing }),
                ("dialogue", dialogue),
                ("round_count", n.to_string()),
            ],
            |raw| {
                let out: RoundGraphOut = parse_json(raw)?;
                if out.rounds.len() != n {
                    return Err(format!("expected {n} rounds, got {}", out.rounds.len()));
                }
                for (i, r) in out.rounds.iter().enumerate() {
                    for sel in [&r.question, &r.full_question, &r.answer] {
                        if let Some(bad) = sel.relations.iter().find(|id| **id >= relation_count) {
                            return Err(format!("round {}: relation {bad} does not exist", i + 1));
                        }
                    }
                }
                Ok(out)
            },
        )?;
        let resolver = LlmCanonicalizer {
            extractor: self,
            entity_types,
        };
        let mut built = Vec::with_capacity(n);
        for r in out.rounds {
            let mut side = |sel: SelectionOut| -> Result<InfoGraph, ExtractionError> {
                let mut keys = BTreeSet::new();
                for name in &sel.entities {
                    keys.extend(self.resolve_mention(name, whole, &resolver)?);
                }
                let chosen: Vec<RelationKey> = sel.relations.iter().map(|id| relations[*id].key()).collect();
                for k in &chosen {
                    keys.insert(k.source.clone());
                    keys.insert(k.target.clone());
                }
                Ok(select(whole, &keys, &chosen))
            };
            let question = side(r.question)?;
            let full_question = side(r.full_question)?;
            let answer = side(r.answer)?;
            built.push(RoundGraphs {
                question,
                full_question,
                answer,
            });
        }
        Ok(built)
    }

    /// Asks the model what `target` refers to among `all_entities`.
    pub fn call_canonicalization(
        &self,
        all_entities: &[Entity],
        all_types: &[String],
        target: &str,
    ) -> Result<CanonicalDecision, ExtractionError> {
        let lookup = InfoGraph::from_entities(all_entities.iter().cloned());
        if let [only] = lookup.find_by_surface(target).as_slice() {
            return Ok(CanonicalDecision::AliasOf { entity: (*only).clone() });
        }
        let resolve = |name: &str| -> Result<EntityKey, String> {
            match lookup.find_by_surface(name).as_slice() {
                [only] => Ok((*only).clone()),
                [] => Err(format!("{name:?} is not an existing entity")),
                _ => Err(format!("{name:?} is ambiguous")),
            }
        };
        self.call(
            PipelineFunction::Canonicalization,
            &[
                ("entities", render_entities(all_entities.iter())),
                ("entity_types", all_types.join(", ")),
                ("target", target.to_string()),
            ],
            |raw| match parse_json::<CanonOut>(raw)? {
                CanonOut::Alias { entity } => Ok(CanonicalDecision::AliasOf {
                    entity: resolve(&entity)?,
                }),
                CanonOut::Group { entities } => {
                    if entities.is_empty() {
                        return Err("group is empty".into());
                    }
                    Ok(CanonicalDecision::GroupOf {
                        entities: entities.iter().map(|e| resolve(e)).collect::<Result<_, _>>()?,
                    })
                }
                CanonOut::New { name, entity_type } => {
                    if name.trim().is_empty() || entity_type.trim().is_empty() {
                        return Err("new entity needs a name and a type".into());
                    }
                    Ok(CanonicalDecision::NewEntity {
                        entity: Entity::new(entity_type, name),
                    })
                }
            },
        )
    }

    /// Runs the full pipeline on one dialogue. Rounds whose question graph is
    /// not contained in the full-question graph are listed as misaligned.
    pub fn analyze(&self, d: &Dialogue) -> Result<DialogueAnalysis, ExtractionError> {
        let declaratives = self.extract_declaratives(d)?;
        let texts: Vec<String> = declaratives.iter().map(|x| x.text.clone()).collect();
        let document = texts.join("\n");
        let topic = self.extract_topic(&document)?;
        let entity_types = self.extract_entity_types(&texts, &topic)?;
        let mut whole = self.extract_graph(&topic, &document, &entity_types)?;
        let full_rounds = self.decontextualize(d)?;
        let rounds = self.extract_round_graphs(&mut whole, d, &full_rounds, &entity_types)?;
        let misaligned = rounds
            .iter()
            .enumerate()
            .filter(|(_, g)| !is_subgraph(&g.question, &g.full_question))
            .map(|(i, _)| MisalignedRound {
                index: i + 1,
                detail: "question graph is not contained in the full-question graph".into(),
            })
            .collect();
        Ok(DialogueAnalysis {
            dialogue_id: d.dialogue_id.clone(),
            declaratives,
            full_rounds,
            topic,
            entity_types,
            whole,
            rounds,
            misaligned,
        })
    }
}

fn select(whole: &InfoGraph, keys: &BTreeSet<EntityKey>, relations: &[RelationKey]) -> InfoGraph {
    let mut g = InfoGraph::from_entities(keys.iter().filter_map(|k| whole.entity(k)).cloned());
    for r in whole.relations().filter(|r| relations.contains(&r.key())) {
        g.insert_relation_unchecked(r.clone());
    }
    g
}

/// Canonicalization backed by the pipeline's canonicalization function.
pub struct LlmCanonicalizer<'a> {
    pub extractor: &'a Extractor,
    pub entity_types: &'a [String],
}

impl Canonicalizer for LlmCanonicalizer<'_> {
    fn decide(&self, candidate: &Entity, graph: &InfoGraph) -> Result<CanonicalDecision, ExtractionError> {
        let all: Vec<Entity> = graph.entities().cloned().collect();
        self.extractor
            .call_canonicalization(&all, self.entity_types, &candidate.name)
    }
}

/// Convenience: canonicalize through the model and report the outcome.
pub fn canonicalize_with_model(
    extractor: &Extractor,
    candidate: &Entity,
    graph: &mut InfoGraph,
    entity_types: &[String],
) -> Result<CanonicalizationResult, ExtractionError> {
    let resolver = LlmCanonicalizer {
        extractor,
        entity_types,
    };
    canonicalize_entity(candidate, graph, &resolver)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template(body: &str) -> PromptTemplate {
        PromptTemplate {
            function: PipelineFunction::Topic,
            body: body.into(),
        }
    }

    #[test]
    fn render_binds_and_escapes() {
        let t = template("Doc: {document} -> {{\"topic\": \"x\"}}");
        assert_eq!(
            t.render(&[("document", "tea".into())]).unwrap(),
            "Doc: tea -> {\"topic\": \"x\"}"
        );
    }

    #[test]
    fn unbound_placeholder_is_config_error() {
        let t = template("{document} {missing}");
        match t.render(&[("document", "x".into())]) {
            Err(ConfigError::UnboundPlaceholder { placeholder, .. }) => assert_eq!(placeholder, "missing"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(template("a } b").render(&[]), Err(ConfigError::TemplateSyntax { .. })));
        assert!(matches!(template("a { b").render(&[]), Err(ConfigError::TemplateSyntax { .. })));
    }

    #[test]
    fn default_templates_render_with_their_bindings() {
        let set = TemplateSet::default();
        let bindings: Vec<(&str, String)> = [
            "dialogue",
            "round_count",
            "document",
            "topic",
            "declaratives",
            "entity_types",
            "entities",
            "relations",
            "target",
        ]
        .iter()
        .map(|k| (*k, "x".to_string()))
        .collect();
        for f in PipelineFunction::ALL {
            set.get(f).render(&bindings).unwrap();
        }
        assert_eq!(set.version().len(), 16);
    }

    #[test]
    fn payload_extraction_strips_fences() {
        assert_eq!(json_payload("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(json_payload("nothing"), "nothing");
    }

    #[test]
    fn cache_keys_differ_by_each_component() {
        let k = ResponseCache::key(PipelineFunction::Topic, "p", "m");
        assert_ne!(k, ResponseCache::key(PipelineFunction::Graph, "p", "m"));
        assert_ne!(k, ResponseCache::key(PipelineFunction::Topic, "q", "m"));
        assert_ne!(k, ResponseCache::key(PipelineFunction::Topic, "p", "n"));
    }

    #[test]
    fn persistent_cache_survives_reload() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::persistent(dir.path()).unwrap();
        c.put("k", "v");
        let again = ResponseCache::persistent(dir.path()).unwrap();
        assert_eq!(again.get("k").as_deref(), Some("v"));
    }
}

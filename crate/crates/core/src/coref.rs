//! Pronoun resolution for the semantic and story answerability checks.
//!
//! A remote coreference service can be configured; when it is absent or
//! fails, a lexicon heuristic built from the dialogue's entity graph links
//! each third-person pronoun to the most recent type-compatible entity
//! mention. Results computed by the heuristic are flagged low-confidence.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::TransportError;
use crate::graph::{normalize_name, EntityKey, InfoGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PronounClass {
    /// he, she and their forms
    Animate,
    /// it, its
    Inanimate,
    /// they, their
    Any,
}

const PRONOUNS: &[(&str, PronounClass)] = &[
    ("he", PronounClass::Animate),
    ("him", PronounClass::Animate),
    ("his", PronounClass::Animate),
    ("himself", PronounClass::Animate),
    ("she", PronounClass::Animate),
    ("her", PronounClass::Animate),
    ("hers", PronounClass::Animate),
    ("herself", PronounClass::Animate),
    ("it", PronounClass::Inanimate),
    ("its", PronounClass::Inanimate),
    ("itself", PronounClass::Inanimate),
    ("they", PronounClass::Any),
    ("them", PronounClass::Any),
    ("their", PronounClass::Any),
    ("theirs", PronounClass::Any),
    ("themselves", PronounClass::Any),
];

const PERSON_TYPES: &[&str] = &[
    "person", "people", "human", "character", "man", "woman", "boy", "girl", "child", "author", "writer", "player",
    "king", "queen", "emperor", "ruler", "leader", "politician", "artist", "scientist", "family member",
];

pub fn pronoun_class(token: &str) -> Option<PronounClass> {
    let t = token.to_lowercase();
    PRONOUNS.iter().find(|(p, _)| *p == t).map(|(_, c)| *c)
}

pub fn is_person_type(entity_type: &str) -> bool {
    let t = normalize_name(entity_type);
    PERSON_TYPES.iter().any(|p| t == *p || t.ends_with(&format!(" {p}")))
}

pub fn compatible(class: PronounClass, entity_type: &str) -> bool {
    match class {
        PronounClass::Animate => is_person_type(entity_type),
        PronounClass::Inanimate => !is_person_type(entity_type),
        PronounClass::Any => true,
    }
}

/// A span of text, with character (not byte) offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    pub fn is_pronoun(&self) -> bool {
        pronoun_class(&self.text).is_some()
    }

    fn overlaps(&self, other: &Mention) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorefChain {
    pub mentions: Vec<Mention>,
}

pub trait CoreferenceClient: Send + Sync {
    fn chains(&self, text: &str) -> Result<Vec<CorefChain>, TransportError>;
    fn name(&self) -> String;
}

/// Word tokens with character offsets.
fn tokens(text: &str) -> Vec<Mention> {
    let mut out = Vec::new();
    let mut start = None;
    let mut buf = String::new();
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() || c == '\'' || c == '-' {
            if start.is_none() {
                start = Some(i);
            }
            buf.push(c);
        } else if let Some(s) = start.take() {
            out.push(Mention {
                text: std::mem::take(&mut buf),
                start: s,
                end: i,
            });
        }
    }
    if let Some(s) = start {
        let end = s + buf.chars().count();
        out.push(Mention { text: buf, start: s, end });
    }
    out
}

/// Pronoun tokens of a text.
pub fn pronoun_mentions(text: &str) -> Vec<Mention> {
    tokens(text).into_iter().filter(Mention::is_pronoun).collect()
}

#[derive(Debug, Clone)]
struct LexEntry {
    words: Vec<String>,
    key: EntityKey,
    entity_type: String,
}

/// Lexicon-driven resolver over the entities of one dialogue.
#[derive(Debug, Clone, Default)]
pub struct HeuristicCoref {
    lexicon: Vec<LexEntry>,
}

impl HeuristicCoref {
    pub fn from_graph(graph: &InfoGraph) -> Self {
        let mut lexicon = Vec::new();
        for e in graph.entities() {
            for surface in e.surface_forms() {
                let words: Vec<String> = tokens(&surface).into_iter().map(|m| m.text.to_lowercase()).collect();
                if words.is_empty() || (words.len() == 1 && pronoun_class(&words[0]).is_some()) {
                    continue;
                }
                lexicon.push(LexEntry {
                    words,
                    key: e.key(),
                    entity_type: e.entity_type.clone(),
                });
            }
        }
        // longest surface first so "Shen Nong" wins over "Shen"
        lexicon.sort_by(|a, b| b.words.len().cmp(&a.words.len()).then_with(|| a.key.cmp(&b.key)));
        HeuristicCoref { lexicon }
    }

    fn resolve(&self, text: &str) -> Vec<CorefChain> {
        let toks = tokens(text);
        let lower: Vec<String> = toks.iter().map(|t| t.text.to_lowercase()).collect();
        let mut chains: Vec<(EntityKey, CorefChain)> = Vec::new();
        // (key, type) of named mentions seen so far, most recent last
        let mut recent: Vec<(EntityKey, String)> = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let named = self
                .lexicon
                .iter()
                .find(|e| lower.len() >= i + e.words.len() && lower[i..i + e.words.len()] == e.words[..]);
            if let Some(entry) = named {
                let last = i + entry.words.len() - 1;
                let mention = Mention {
                    text: text
                        .chars()
                        .skip(toks[i].start)
                        .take(toks[last].end - toks[i].start)
                        .collect(),
                    start: toks[i].start,
                    end: toks[last].end,
                };
                push_mention(&mut chains, &entry.key, mention);
                recent.push((entry.key.clone(), entry.entity_type.clone()));
                i = last + 1;
                continue;
            }
            if let Some(class) = pronoun_class(&toks[i].text) {
                if let Some((key, _)) = recent.iter().rev().find(|(_, t)| compatible(class, t)) {
                    let key = key.clone();
                    push_mention(&mut chains, &key, toks[i].clone());
                }
            }
            i += 1;
        }
        chains
            .into_iter()
            .map(|(_, c)| c)
            .filter(|c| c.mentions.len() > 1)
            .collect()
    }
}

fn push_mention(chains: &mut Vec<(EntityKey, CorefChain)>, key: &EntityKey, m: Mention) {
    match chains.iter_mut().find(|(k, _)| k == key) {
        Some((_, c)) => c.mentions.push(m),
        None => chains.push((key.clone(), CorefChain { mentions: vec![m] })),
    }
}

impl CoreferenceClient for HeuristicCoref {
    fn chains(&self, text: &str) -> Result<Vec<CorefChain>, TransportError> {
        Ok(self.resolve(text))
    }

    fn name(&self) -> String {
        "lexicon-heuristic".into()
    }
}

#[derive(Serialize)]
struct CorefRequest<'a> {
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    focus: Option<&'a str>,
}

#[derive(Deserialize)]
struct CorefResponse {
    chains: Vec<CorefChain>,
}

/// Client for `POST {endpoint}/coref`.
pub struct HttpCoref {
    endpoint: String,
    http: reqwest::blocking::Client,
}

impl HttpCoref {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, TransportError> {
        Ok(HttpCoref {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            http: reqwest::blocking::Client::builder().timeout(timeout).build()?,
        })
    }
}

impl CoreferenceClient for HttpCoref {
    fn chains(&self, text: &str) -> Result<Vec<CorefChain>, TransportError> {
        let resp = self
            .http
            .post(format!("{}/coref", self.endpoint))
            .json(&CorefRequest { text, focus: None })
            .send()?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        let body: CorefResponse = resp.json().map_err(|e| TransportError::Malformed(e.to_string()))?;
        Ok(body.chains)
    }

    fn name(&self) -> String {
        format!("http:{}", self.endpoint)
    }
}

/// Remote resolver with heuristic fallback.
pub struct Coref<'a> {
    pub remote: Option<&'a dyn CoreferenceClient>,
    pub fallback: HeuristicCoref,
}

impl<'a> Coref<'a> {
    pub fn heuristic(graph: &InfoGraph) -> Self {
        Coref {
            remote: None,
            fallback: HeuristicCoref::from_graph(graph),
        }
    }

    pub fn with_remote(remote: Option<&'a dyn CoreferenceClient>, graph: &InfoGraph) -> Self {
        Coref {
            remote,
            fallback: HeuristicCoref::from_graph(graph),
        }
    }

    /// Chains for `text` and whether the fallback produced them.
    pub fn chains(&self, text: &str) -> (Vec<CorefChain>, bool) {
        if let Some(remote) = self.remote {
            match remote.chains(text) {
                Ok(c) => return (c, false),
                Err(e) => log::warn!("coreference service {} failed, using heuristic: {e}", remote.name()),
            }
        }
        (self.fallback.resolve(text), true)
    }
}

/// Outcome of one resolution check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckOutcome {
    pub positive: bool,
    pub low_confidence: bool,
}

/// True iff every pronoun of `question` belongs to a chain that has a
/// non-pronoun mention before it, in the prior rounds or earlier in the
/// question. A question without pronouns passes.
pub fn check_semantic(question: &str, prior_rounds: &[String], coref: &Coref<'_>) -> CheckOutcome {
    let question_pronouns = pronoun_mentions(question);
    if question_pronouns.is_empty() {
        return CheckOutcome {
            positive: true,
            low_confidence: false,
        };
    }
    if prior_rounds.is_empty() && !has_named_mention_before(question, coref) {
        return CheckOutcome {
            positive: false,
            low_confidence: false,
        };
    }
    let mut text = prior_rounds.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    let offset = text.chars().count();
    text.push_str(question);
    let (chains, low_confidence) = coref.chains(&text);
    let positive = question_pronouns.iter().all(|p| {
        let shifted = Mention {
            text: p.text.clone(),
            start: p.start + offset,
            end: p.end + offset,
        };
        chains.iter().any(|c| {
            c.mentions.iter().any(|m| m.overlaps(&shifted))
                && c.mentions.iter().any(|m| !m.is_pronoun() && m.end <= shifted.start)
        })
    });
    CheckOutcome {
        positive,
        low_confidence,
    }
}

fn has_named_mention_before(question: &str, coref: &Coref<'_>) -> bool {
    let (chains, _) = coref.chains(question);
    chains.iter().any(|c| c.mentions.iter().any(|m| !m.is_pronoun()))
}

/// Story fallback: every missing entity must be referred to, somewhere in the
/// story, by a pronoun that also occurs in the question.
pub fn check_story(question: &str, missing: &InfoGraph, story: Option<&str>, coref: &Coref<'_>) -> CheckOutcome {
    let negative = CheckOutcome {
        positive: false,
        low_confidence: false,
    };
    let Some(story) = story.filter(|s| !s.trim().is_empty()) else {
        return negative;
    };
    if missing.entity_count() == 0 {
        return negative;
    }
    let question_pronouns: Vec<String> = pronoun_mentions(question).iter().map(|m| m.text.to_lowercase()).collect();
    if question_pronouns.is_empty() {
        return negative;
    }
    let (chains, low_confidence) = coref.chains(story);
    let positive = missing.entities().all(|e| {
        let surfaces = e.surface_forms();
        let usable: Vec<&String> = question_pronouns
            .iter()
            .filter(|p| pronoun_class(p).is_some_and(|c| compatible(c, &e.entity_type)))
            .collect();
        chains.iter().any(|c| {
            c.mentions.iter().any(|m| surfaces.contains(&normalize_name(&m.text)))
                && c.mentions.iter().any(|m| usable.contains(&&m.text.to_lowercase()))
        })
    });
    CheckOutcome {
        positive,
        low_confidence,
    }
}

//! Answer similarity: exact match, token F1, embedding cosine and their
//! self-weighted fusion (MSS).
//!
//! MSS weights each component by its share of the component total, so
//! `MSS = (SS² + EM² + F1²) / (SS + EM + F1)`. A long answer that merely
//! contains the gold answer loses EM and F1 and is pulled down accordingly.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::TransportError;

pub const FALLBACK_DIMENSION: usize = 256;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lower-cases, strips punctuation, drops English articles and collapses
/// whitespace; returns the remaining tokens.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect();
    stripped
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_string)
        .collect()
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '‘' | '’' | '“' | '”' | '«' | '»' | '…' | '–' | '—' | '¿' | '¡' | '。' | '，' | '、'
        )
}

pub fn normalize_answer(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    if normalize_answer(pred) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_tokens(pred);
    let g = normalize_tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (na * nb),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub ss: f64,
    pub em: f64,
    pub f1: f64,
}

impl ScoreTriple {
    pub fn new(ss: f64, em: f64, f1: f64) -> Self {
        ScoreTriple { ss, em, f1 }
    }

    pub fn total(&self) -> f64 {
        self.ss + self.em + self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedScore {
    pub value: f64,
    /// `(w_ss, w_em, w_f1)`
    pub weights: (f64, f64, f64),
    /// All three components were zero; weights are undefined and set to zero.
    #[serde(default)]
    pub degenerate: bool,
}

pub fn mss(t: &ScoreTriple) -> MixedScore {
    let total = t.total();
    if total <= 0.0 {
        return MixedScore {
            value: 0.0,
            weights: (0.0, 0.0, 0.0),
            degenerate: true,
        };
    }
    let weights = (t.ss / total, t.em / total, t.f1 / total);
    let value = weights.0 * t.ss + weights.1 * t.em + weights.2 * t.f1;
    MixedScore {
        value,
        weights,
        degenerate: false,
    }
}

/// Text embedding backend.
pub trait EmbeddingClient: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError>;
    fn name(&self) -> String;
}

/// Bag-of-words vector over hashed normalized tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

impl HashingEmbedder {
    pub fn bucket(token: &str) -> usize {
        let digest = Sha256::digest(token.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(b) % FALLBACK_DIMENSION as u64) as usize
    }

    pub fn vector(text: &str) -> Vec<f32> {
        let mut v = vec![0f32; FALLBACK_DIMENSION];
        for t in normalize_tokens(text) {
            v[Self::bucket(&t)] += 1.0;
        }
        v
    }
}

impl EmbeddingClient for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
        Ok(texts.iter().map(|t| Self::vector(t)).collect())
    }

    fn name(&self) -> String {
        format!("hashing-bow-{FALLBACK_DIMENSION}")
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Client for `POST {endpoint}/embed`.
pub struct HttpEmbedder {
    endpoint: String,
    http: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, TransportError> {
        let http = reqwest::blocking::Client::builder().timeout(timeout).build()?;
        Ok(HttpEmbedder {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            http,
        })
    }
}

impl EmbeddingClient for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
        let resp = self
            .http
            .post(format!("{}/embed", self.endpoint))
            .json(&EmbedRequest { texts })
            .send()?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        let body: EmbedResponse = resp.json().map_err(|e| TransportError::Malformed(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(TransportError::Malformed(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        if let Some(first) = body.vectors.first() {
            if body.vectors.iter().any(|v| v.len() != first.len()) {
                return Err(TransportError::Malformed("vector dimensions differ".into()));
            }
        }
        Ok(body.vectors)
    }

    fn name(&self) -> String {
        format!("http:{}", self.endpoint)
    }
}

/// Computes score triples, caching embeddings by text and falling back to the
/// hashing embedder when the configured one fails.
pub struct Scorer {
    embedder: Arc<dyn EmbeddingClient>,
    cache: RwLock<HashMap<String, Vec<f32>>>,
    fallback_cache: RwLock<HashMap<String, Vec<f32>>>,
    low_confidence: AtomicBool,
}

impl Scorer {
    pub fn new(embedder: Arc<dyn EmbeddingClient>) -> Self {
        Scorer {
            embedder,
            cache: RwLock::new(HashMap::new()),
            fallback_cache: RwLock::new(HashMap::new()),
            low_confidence: AtomicBool::new(false),
        }
    }

    pub fn fallback() -> Self {
        Scorer::new(Arc::new(HashingEmbedder))
    }

    pub fn embedder_name(&self) -> String {
        self.embedder.name()
    }

    /// True once any similarity was computed with the fallback embedder
    /// because the configured one failed.
    pub fn low_confidence(&self) -> bool {
        self.low_confidence.load(Ordering::Relaxed)
    }

    fn vectors(&self, a: &str, b: &str) -> (Vec<f32>, Vec<f32>) {
        let cached = |t: &str| self.cache.read().ok().and_then(|c| c.get(t).cloned());
        let missing: Vec<String> = [a, b]
            .iter()
            .filter(|t| cached(t).is_none())
            .map(|t| t.to_string())
            .collect();
        if !missing.is_empty() {
            match self.embedder.embed(&missing) {
                Ok(vs) => {
                    if let Ok(mut c) = self.cache.write() {
                        for (t, v) in missing.into_iter().zip(vs) {
                            c.insert(t, v);
                        }
                    }
                }
                Err(e) => {
                    log::warn!("embedder {} failed, using fallback: {e}", self.embedder.name());
                    self.low_confidence.store(true, Ordering::Relaxed);
                    return (self.fallback_vector(a), self.fallback_vector(b));
                }
            }
        }
        match (cached(a), cached(b)) {
            (Some(x), Some(y)) => (x, y),
            _ => (self.fallback_vector(a), self.fallback_vector(b)),
        }
    }

    fn fallback_vector(&self, t: &str) -> Vec<f32> {
        if let Some(v) = self.fallback_cache.read().ok().and_then(|c| c.get(t).cloned()) {
            return v;
        }
        let v = HashingEmbedder::vector(t);
        if let Ok(mut c) = self.fallback_cache.write() {
            c.insert(t.to_string(), v.clone());
        }
        v
    }

    /// Cosine of the two embeddings, clamped to `[0, 1]`.
    pub fn semantic_similarity(&self, pred: &str, gold: &str) -> f64 {
        if pred == gold {
            return 1.0;
        }
        let (a, b) = self.vectors(pred, gold);
        cosine(&a, &b).clamp(0.0, 1.0)
    }

    pub fn triple(&self, pred: &str, gold: &str) -> ScoreTriple {
        ScoreTriple {
            ss: self.semantic_similarity(pred, gold),
            em: exact_match(pred, gold),
            f1: token_f1(pred, gold),
        }
    }

    pub fn mss(&self, pred: &str, gold: &str) -> f64 {
        mss(&self.triple(pred, gold)).value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("India", "india"), 1.0);
        assert_eq!(exact_match("the India", "India"), 1.0);
        assert_eq!(exact_match("in India", "India"), 0.0);
        assert_eq!(exact_match("India.", " India "), 1.0);
    }

    #[test]
    fn token_f1_examples() {
        assert_eq!(token_f1("India", "India"), 1.0);
        // precision 1/2, recall 1/1
        assert!((token_f1("in India", "India") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("unknown", "India"), 0.0);
        assert_eq!(token_f1("the", "a"), 1.0);
        assert_eq!(token_f1("the", "India"), 0.0);
    }

    #[test]
    fn fallback_embedder_properties() {
        let s = Scorer::fallback();
        assert_eq!(s.semantic_similarity("abc", "abc"), 1.0);
        assert_ne!(HashingEmbedder::bucket("india"), HashingEmbedder::bucket("britain"));
        assert_ne!(HashingEmbedder::bucket("india"), HashingEmbedder::bucket("unknown"));
        assert_eq!(s.semantic_similarity("India", "Britain"), 0.0);
        assert_eq!(s.semantic_similarity("India", "the india!"), 1.0);
        let partial = s.semantic_similarity("India", "India is the country");
        assert!(partial > 0.0 && partial < 1.0);
    }

    #[test]
    fn mss_examples() {
        assert_eq!(mss(&ScoreTriple::new(1.0, 1.0, 1.0)).value, 1.0);
        assert!((mss(&ScoreTriple::new(0.5, 0.5, 0.5)).value - 0.5).abs() < 1e-15);
        // (0.64 + 0 + 0.25) / 1.3
        assert!((mss(&ScoreTriple::new(0.8, 0.0, 0.5)).value - 0.684_615_384_6).abs() < 1e-9);
        let d = mss(&ScoreTriple::new(0.0, 0.0, 0.0));
        assert_eq!(d.value, 0.0);
        assert!(d.degenerate);
        assert_eq!(d.weights, (0.0, 0.0, 0.0));
    }

    struct Failing;
    impl EmbeddingClient for Failing {
        fn embed(&self, _: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
            Err(TransportError::Http("down".into()))
        }
        fn name(&self) -> String {
            "failing".into()
        }
    }

    #[test]
    fn unreachable_embedder_falls_back() {
        let s = Scorer::new(Arc::new(Failing));
        assert_eq!(s.semantic_similarity("India", "Britain"), 0.0);
        assert!(s.low_confidence());
    }

    struct Negative;
    impl EmbeddingClient for Negative {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
            Ok(texts
                .iter()
                .enumerate()
                .map(|(i, _)| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![-1.0, 0.0] })
                .collect())
        }
        fn name(&self) -> String {
            "negative".into()
        }
    }

    #[test]
    fn negative_cosine_clamps_to_zero() {
        let s = Scorer::new(Arc::new(Negative));
        assert_eq!(s.semantic_similarity("x", "y"), 0.0);
    }

    proptest! {
        #[test]
        fn mss_bounds_and_symmetry(ss in 0.0f64..=1.0, em in prop::bool::ANY, f1 in 0.0f64..=1.0) {
            let em = if em { 1.0 } else { 0.0 };
            let t = ScoreTriple::new(ss, em, f1);
            let m = mss(&t);
            let max = ss.max(em).max(f1);
            prop_assert!(m.value <= max + 1e-12);
            if t.total() > 0.0 {
                let (a, b, c) = m.weights;
                prop_assert!((a + b + c - 1.0).abs() <= 1e-12);
                prop_assert!(m.value + 1e-12 >= max * max / t.total());
            }
            for p in [ScoreTriple::new(em, f1, ss), ScoreTriple::new(f1, ss, em), ScoreTriple::new(ss, f1, em)] {
                prop_assert!((mss(&p).value - m.value).abs() < 1e-12);
            }
        }

        #[test]
        fn reflexivity(x in "[A-Za-z]{1,8}( [A-Za-z]{1,8}){0,4}") {
            let s = Scorer::fallback();
            prop_assert_eq!(exact_match(&x, &x), 1.0);
            prop_assert_eq!(token_f1(&x, &x), 1.0);
            prop_assert_eq!(s.semantic_similarity(&x, &x), 1.0);
        }
    }
}

//! Driving a system under test through perturbed dialogues.
//!
//! Rounds of one dialogue are sent strictly in perturbed order, each request
//! carrying the system instructions, the earlier question/answer turns and the
//! current question. Dialogues run in parallel up to a configured cap. Mock
//! systems with known defects exercise the metamorphic oracle offline.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answerability::{AnswerabilityStatus, ExpectedAnswer, RoundAnnotation, UNKNOWN};
use crate::chat::{ChatBackend, ChatMessage, ChatRequest, HttpChatClient};
use crate::error::{ConfigError, SutError};
use crate::perturb::{PerturbationKind, PerturbedDialogue};
use crate::scoring::{mss, normalize_answer, MixedScore, ScoreTriple, Scorer};

pub const DEFAULT_SYSTEM_INSTRUCTIONS: &str = "You are taking part in a multi-turn question answering conversation. \
Answer each question using the conversation so far. Keep every answer short and precise: a few words, no explanation. \
If a question is ambiguous or cannot be answered from the conversation, answer with \"Unknown\".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryPolicy {
    /// Earlier turns carry the system's own answers.
    #[default]
    SelfGenerated,
    /// Earlier turns carry the expected answers.
    Gold,
}

impl FromStr for HistoryPolicy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "self_generated" | "self" => Ok(HistoryPolicy::SelfGenerated),
            "gold" => Ok(HistoryPolicy::Gold),
            _ => Err(ConfigError::UnknownHistoryPolicy(s.to_string())),
        }
    }
}

impl fmt::Display for HistoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HistoryPolicy::SelfGenerated => "self_generated",
            HistoryPolicy::Gold => "gold",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefectProfile {
    /// Replies with the expected answer.
    Oracle,
    /// Forgets context older than `window` turns.
    Amnesiac { window: usize },
    /// Never admits "Unknown".
    StubbornNeverUnknown,
    /// Repeats its previous answer.
    ParrotRepeatLast,
    RandomToken { seed: u64 },
}

impl FromStr for DefectProfile {
    type Err = ConfigError;

    /// Accepts `oracle`, `amnesiac:K` (or `amnesiac(K)`), `stubborn`,
    /// `parrot`, `random[:SEED]`, optionally prefixed with `mock:`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::UnknownProfile(s.to_string());
        let body = s.trim().strip_prefix("mock:").unwrap_or(s.trim()).to_ascii_lowercase();
        let (name, arg) = match body.split_once([':', '(']) {
            Some((n, a)) => (n.to_string(), Some(a.trim_end_matches(')').to_string())),
            None => (body.clone(), None),
        };
        match (name.as_str(), arg) {
            ("oracle", None) => Ok(DefectProfile::Oracle),
            ("amnesiac", Some(k)) => Ok(DefectProfile::Amnesiac {
                window: k.parse().map_err(|_| bad())?,
            }),
            ("amnesiac", None) => Ok(DefectProfile::Amnesiac { window: 1 }),
            ("stubborn" | "stubborn_never_unknown", None) => Ok(DefectProfile::StubbornNeverUnknown),
            ("parrot" | "parrot_repeat_last", None) => Ok(DefectProfile::ParrotRepeatLast),
            ("random" | "random_token", None) => Ok(DefectProfile::RandomToken { seed: 0 }),
            ("random" | "random_token", Some(seed)) => Ok(DefectProfile::RandomToken {
                seed: seed.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for DefectProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefectProfile::Oracle => write!(f, "oracle"),
            DefectProfile::Amnesiac { window } => write!(f, "amnesiac:{window}"),
            DefectProfile::StubbornNeverUnknown => write!(f, "stubborn"),
            DefectProfile::ParrotRepeatLast => write!(f, "parrot"),
            DefectProfile::RandomToken { seed } => write!(f, "random:{seed}"),
        }
    }
}

const FABRICATED: &[&str] = &["Yes", "Paris", "1997", "Blue", "John", "Seven", "London", "No"];
const RANDOM_WORDS: &[&str] = &[
    "apple", "river", "seven", "green", "Tuesday", "mountain", "piano", "silver", "yes", "no", "London", "forty",
];

fn text_hash(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}

fn is_unknown(text: &str) -> bool {
    normalize_answer(text) == "unknown"
}

/// What a mock system may know about the round it answers.
#[derive(Debug, Clone, Copy)]
pub struct MockRoundInfo<'a> {
    pub annotation: Option<&'a RoundAnnotation>,
    pub dialogue_id: &'a str,
    pub new_index: usize,
}

/// Reply of a mock system with the given defect.
pub fn mock_respond(
    profile: DefectProfile,
    history: &[(String, String)],
    question: &str,
    info: MockRoundInfo<'_>,
) -> Result<String, SutError> {
    let expected = info.annotation.map(|a| a.expected_answer.as_str());
    match profile {
        DefectProfile::Oracle => expected.map(str::to_string).ok_or(SutError::OracleWithoutExpected),
        DefectProfile::Amnesiac { window } => {
            let a = info.annotation.ok_or(SutError::OracleWithoutExpected)?;
            let forgotten = a.verdict == AnswerabilityStatus::ContextResolved
                && a.antecedent_distance.is_some_and(|d| d > window);
            Ok(if forgotten {
                UNKNOWN.to_string()
            } else {
                a.expected_answer.clone()
            })
        }
        DefectProfile::StubbornNeverUnknown => match expected {
            Some(e) if !is_unknown(e) => Ok(e.to_string()),
            _ => {
                let i = text_hash(&[question]) as usize % FABRICATED.len();
                Ok(FABRICATED[i].to_string())
            }
        },
        DefectProfile::ParrotRepeatLast => match history.last() {
            Some((_, previous)) => Ok(previous.clone()),
            None => Ok(expected.unwrap_or(UNKNOWN).to_string()),
        },
        DefectProfile::RandomToken { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ text_hash(&[info.dialogue_id, &info.new_index.to_string(), question]),
            );
            Ok(RANDOM_WORDS.choose(&mut rng).copied().unwrap_or("yes").to_string())
        }
    }
}

pub struct RoundContext<'a> {
    pub dialogue_id: &'a str,
    pub kind: PerturbationKind,
    pub new_index: usize,
    pub question: &'a str,
    pub history: &'a [(String, String)],
    pub annotation: Option<&'a RoundAnnotation>,
}

pub trait SystemUnderTest: Send + Sync {
    fn respond(&self, messages: &[ChatMessage], round: &RoundContext<'_>) -> Result<String, SutError>;
    fn describe(&self) -> String;
}

/// A chat-completions endpoint as the system under test.
pub struct HttpSut {
    client: HttpChatClient,
}

impl HttpSut {
    pub fn new(client: HttpChatClient) -> Self {
        HttpSut { client }
    }
}

impl SystemUnderTest for HttpSut {
    fn respond(&self, messages: &[ChatMessage], round: &RoundContext<'_>) -> Result<String, SutError> {
        self.client
            .complete(&ChatRequest {
                purpose: "sut".into(),
                messages: messages.to_vec(),
            })
            .map_err(|source| SutError::Transport {
                new_index: round.new_index,
                source,
            })
    }

    fn describe(&self) -> String {
        self.client.describe()
    }
}

pub struct MockSut {
    pub profile: DefectProfile,
}

impl SystemUnderTest for MockSut {
    fn respond(&self, _messages: &[ChatMessage], round: &RoundContext<'_>) -> Result<String, SutError> {
        mock_respond(
            self.profile,
            round.history,
            round.question,
            MockRoundInfo {
                annotation: round.annotation,
                dialogue_id: round.dialogue_id,
                new_index: round.new_index,
            },
        )
    }

    fn describe(&self) -> String {
        format!("mock:{}", self.profile)
    }
}

/// Any chat backend (including the fixture mock) wrapped as a system under test.
pub struct ChatSut(pub Arc<dyn ChatBackend>);

impl SystemUnderTest for ChatSut {
    fn respond(&self, messages: &[ChatMessage], round: &RoundContext<'_>) -> Result<String, SutError> {
        self.0
            .complete(&ChatRequest {
                purpose: "sut".into(),
                messages: messages.to_vec(),
            })
            .map_err(|source| SutError::Transport {
                new_index: round.new_index,
                source,
            })
    }

    fn describe(&self) -> String {
        self.0.describe()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub dialogue_id: String,
    pub kind: PerturbationKind,
    pub new_index: usize,
    pub origin_index: usize,
    pub question: String,
    pub expected: Option<ExpectedAnswer>,
    pub generated: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mss: Option<MixedScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RoundOutcome {
    pub fn seed_key(&self) -> SeedKey {
        SeedKey {
            dialogue_id: self.dialogue_id.clone(),
            origin_index: self.origin_index,
        }
    }

    pub fn failed(&self) -> bool {
        self.generated.is_none()
    }

    pub fn answerable(&self) -> Option<bool> {
        self.expected.as_ref().map(|e| e.answerable)
    }
}

/// Original dialogue and round a perturbed round came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeedKey {
    pub dialogue_id: String,
    pub origin_index: usize,
}

impl fmt::Display for SeedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.dialogue_id, self.origin_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueRun {
    pub outcomes: Vec<RoundOutcome>,
    /// A round failed and the remaining rounds were not sent.
    pub partial: bool,
}

/// Strips surrounding whitespace and quotes.
pub fn clean_answer(raw: &str) -> String {
    raw.trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '“' || c == '”' || c == '`')
        .trim()
        .to_string()
}

pub struct Harness<'a> {
    pub sut: &'a dyn SystemUnderTest,
    pub system_instructions: String,
    pub history_policy: HistoryPolicy,
    pub scorer: Option<&'a Scorer>,
}

impl<'a> Harness<'a> {
    pub fn new(sut: &'a dyn SystemUnderTest) -> Self {
        Harness {
            sut,
            system_instructions: DEFAULT_SYSTEM_INSTRUCTIONS.to_string(),
            history_policy: HistoryPolicy::default(),
            scorer: None,
        }
    }

    pub fn messages(&self, history: &[(String, String)], question: &str) -> Vec<ChatMessage> {
        let mut m = Vec::with_capacity(2 + 2 * history.len());
        m.push(ChatMessage::system(self.system_instructions.clone()));
        for (q, a) in history {
            m.push(ChatMessage::user(q.clone()));
            m.push(ChatMessage::assistant(a.clone()));
        }
        m.push(ChatMessage::user(question.to_string()));
        m
    }

    /// Sends the rounds of one annotated dialogue in order.
    pub fn run_dialogue(&self, pd: &PerturbedDialogue) -> DialogueRun {
        let mut history: Vec<(String, String)> = Vec::with_capacity(pd.len());
        let mut outcomes = Vec::with_capacity(pd.len());
        for round in &pd.rounds {
            let annotation = round.annotation.as_ref();
            let expected = annotation.map(RoundAnnotation::expected);
            let ctx = RoundContext {
                dialogue_id: &pd.source_dialogue_id,
                kind: pd.kind,
                new_index: round.provenance.new_index,
                question: &round.question,
                history: &history,
                annotation,
            };
            let messages = self.messages(&history, &round.question);
            let mut outcome = RoundOutcome {
                dialogue_id: pd.source_dialogue_id.clone(),
                kind: pd.kind,
                new_index: round.provenance.new_index,
                origin_index: round.provenance.origin_index,
                question: round.question.clone(),
                expected: expected.clone(),
                generated: None,
                scores: None,
                mss: None,
                error: None,
            };
            match self.sut.respond(&messages, &ctx) {
                Ok(raw) => {
                    let generated = clean_answer(&raw);
                    if let (Some(scorer), Some(e)) = (self.scorer, &expected) {
                        let t = scorer.triple(&generated, &e.text);
                        outcome.mss = Some(mss(&t));
                        outcome.scores = Some(t);
                    }
                    let shown = match self.history_policy {
                        HistoryPolicy::SelfGenerated => generated.clone(),
                        HistoryPolicy::Gold => expected.as_ref().map_or_else(|| generated.clone(), |e| e.text.clone()),
                    };
                    history.push((round.question.clone(), shown));
                    outcome.generated = Some(generated);
                    outcomes.push(outcome);
                }
                Err(e) => {
                    log::warn!("{} round {}: {e}", pd.source_dialogue_id, round.provenance.new_index);
                    outcome.error = Some(e.to_string());
                    outcomes.push(outcome);
                    return DialogueRun {
                        outcomes,
                        partial: true,
                    };
                }
            }
        }
        DialogueRun {
            outcomes,
            partial: false,
        }
    }

    /// Runs dialogues concurrently on `parallelism` threads. Results keep
    /// input order.
    pub fn run_all(&self, dialogues: &[PerturbedDialogue], parallelism: usize) -> Vec<DialogueRun> {
        self.run_each(dialogues, parallelism, |_, _| {})
    }

    /// Like `run_all`, calling `on_done` as each dialogue finishes.
    pub fn run_each<F>(&self, dialogues: &[PerturbedDialogue], parallelism: usize, on_done: F) -> Vec<DialogueRun>
    where
        F: Fn(&PerturbedDialogue, &DialogueRun) + Sync,
    {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| {
            dialogues
                .par_iter()
                .map(|pd| {
                    let run = self.run_dialogue(pd);
                    on_done(pd, &run);
                    run
                })
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn annotation(expected: &str, verdict: AnswerabilityStatus, distance: Option<usize>) -> RoundAnnotation {
        RoundAnnotation {
            answerable: verdict.is_answerable(),
            verdict,
            expected_answer: expected.into(),
            missing: vec![],
            antecedent_distance: distance,
            checks: vec![],
            gold_unknown: false,
        }
    }

    fn info(a: Option<&RoundAnnotation>) -> MockRoundInfo<'_> {
        MockRoundInfo {
            annotation: a,
            dialogue_id: "d",
            new_index: 1,
        }
    }

    #[test]
    fn profile_parsing() {
        assert_eq!("mock:oracle".parse::<DefectProfile>().unwrap(), DefectProfile::Oracle);
        assert_eq!(
            "amnesiac(2)".parse::<DefectProfile>().unwrap(),
            DefectProfile::Amnesiac { window: 2 }
        );
        assert_eq!(
            "mock:amnesiac:3".parse::<DefectProfile>().unwrap(),
            DefectProfile::Amnesiac { window: 3 }
        );
        assert_eq!("stubborn".parse::<DefectProfile>().unwrap(), DefectProfile::StubbornNeverUnknown);
        assert!("mock:psychic".parse::<DefectProfile>().is_err());
        for p in [
            DefectProfile::Oracle,
            DefectProfile::Amnesiac { window: 4 },
            DefectProfile::ParrotRepeatLast,
            DefectProfile::RandomToken { seed: 9 },
        ] {
            assert_eq!(p.to_string().parse::<DefectProfile>().unwrap(), p);
        }
    }

    #[test]
    fn oracle_replies_expected_or_errors() {
        let a = annotation("India", AnswerabilityStatus::ContextResolved, Some(1));
        assert_eq!(mock_respond(DefectProfile::Oracle, &[], "q", info(Some(&a))).unwrap(), "India");
        assert!(matches!(
            mock_respond(DefectProfile::Oracle, &[], "q", info(None)),
            Err(SutError::OracleWithoutExpected)
        ));
    }

    #[test]
    fn amnesiac_window() {
        let far = annotation("India", AnswerabilityStatus::ContextResolved, Some(3));
        let near = annotation("India", AnswerabilityStatus::ContextResolved, Some(1));
        let p = DefectProfile::Amnesiac { window: 1 };
        assert_eq!(mock_respond(p, &[], "q", info(Some(&far))).unwrap(), UNKNOWN);
        assert_eq!(mock_respond(p, &[], "q", info(Some(&near))).unwrap(), "India");
    }

    #[test]
    fn stubborn_never_says_unknown() {
        let a = annotation(UNKNOWN, AnswerabilityStatus::Unresolved, None);
        for q in ["a", "b", "c", "When did he take it?"] {
            let r = mock_respond(DefectProfile::StubbornNeverUnknown, &[], q, info(Some(&a))).unwrap();
            assert!(!is_unknown(&r));
        }
    }

    #[test]
    fn parrot_repeats_previous_answer() {
        let a = annotation("1200 BC", AnswerabilityStatus::SelfResolvable, None);
        let history = vec![("Which country?".to_string(), "India".to_string())];
        assert_eq!(
            mock_respond(DefectProfile::ParrotRepeatLast, &history, "When?", info(Some(&a))).unwrap(),
            "India"
        );
    }

    #[test]
    fn fabricated_tokens_are_far_from_unknown() {
        let scorer = Scorer::fallback();
        for t in FABRICATED {
            assert!(scorer.mss(t, UNKNOWN) < 0.05, "{t}");
        }
    }

    #[test]
    fn answers_are_cleaned() {
        assert_eq!(clean_answer("  \"India\"\n"), "India");
        assert_eq!(clean_answer("'Unknown'"), "Unknown");
    }
}

//! Seed dialogue datasets: parsing, serialization and validation.
//!
//! Two input layouts are accepted. The CoQA layout pairs `questions` and
//! `answers` by `turn_id` and carries a story document; the generic layout
//! lists rounds directly. Text is kept exactly as read.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DatasetError;

/// Identifies one round of one seed dialogue.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RoundId {
    pub dialogue_id: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRound {
    /// 1-based ordinal within the dialogue.
    pub index: usize,
    pub question: String,
    pub gold_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub rounds: Vec<QaRound>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub story: Option<String>,
}

impl Dialogue {
    /// Builds a dialogue from `(question, answer)` pairs, numbering rounds from 1.
    pub fn from_pairs<Q, A>(dialogue_id: impl Into<String>, pairs: impl IntoIterator<Item = (Q, A)>) -> Self
    where
        Q: Into<String>,
        A: Into<String>,
    {
        let rounds = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (q, a))| QaRound {
                index: i + 1,
                question: q.into(),
                gold_answer: a.into(),
            })
            .collect();
        Dialogue {
            dialogue_id: dialogue_id.into(),
            rounds,
            story: None,
        }
    }

    pub fn with_story(mut self, story: impl Into<String>) -> Self {
        self.story = Some(story.into());
        self
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// Round lookup by 1-based index.
    pub fn round(&self, index: usize) -> Option<&QaRound> {
        self.rounds.iter().find(|r| r.index == index)
    }

    pub fn round_id(&self, index: usize) -> RoundId {
        RoundId {
            dialogue_id: self.dialogue_id.clone(),
            index,
        }
    }

    pub fn questions(&self) -> impl Iterator<Item = &str> {
        self.rounds.iter().map(|r| r.question.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub dialogues: Vec<Dialogue>,
    pub source_label: String,
}

impl Dataset {
    pub fn new(dialogues: Vec<Dialogue>, source_label: impl Into<String>) -> Result<Self, DatasetError> {
        if dialogues.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut seen = HashSet::new();
        for d in &dialogues {
            if !seen.insert(d.dialogue_id.as_str()) {
                return Err(DatasetError::DuplicateDialogue(d.dialogue_id.clone()));
            }
        }
        Ok(Dataset {
            dialogues,
            source_label: source_label.into(),
        })
    }

    pub fn get(&self, dialogue_id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.dialogue_id == dialogue_id)
    }

    pub fn round(&self, id: &RoundId) -> Option<&QaRound> {
        self.get(&id.dialogue_id).and_then(|d| d.round(id.index))
    }

    pub fn total_rounds(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    /// Splits the dataset into dialogues that pass validation and reports for
    /// the ones that do not.
    pub fn partition_valid(&self) -> (Vec<&Dialogue>, Vec<ValidationReport>) {
        let mut valid = Vec::new();
        let mut rejected = Vec::new();
        for d in &self.dialogues {
            let report = validate_dialogue(d);
            if report.is_valid() {
                valid.push(d);
            } else {
                rejected.push(report);
            }
        }
        (valid, rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Coqa,
    Generic,
}

impl FromStr for DatasetFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "coqa" => Ok(DatasetFormat::Coqa),
            "generic" => Ok(DatasetFormat::Generic),
            other => Err(DatasetError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::Coqa => "coqa",
            DatasetFormat::Generic => "generic",
        })
    }
}

#[derive(Deserialize)]
struct CoqaFile {
    data: Vec<CoqaRecord>,
}

#[derive(Deserialize)]
struct CoqaRecord {
    id: String,
    story: String,
    questions: Vec<CoqaTurn>,
    answers: Vec<CoqaTurn>,
}

#[derive(Deserialize)]
struct CoqaTurn {
    turn_id: i64,
    input_text: String,
}

#[derive(Serialize, Deserialize)]
struct GenericFile {
    dialogues: Vec<GenericRecord>,
}

#[derive(Serialize, Deserialize)]
struct GenericRecord {
    dialogue_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    story: Option<String>,
    rounds: Vec<GenericRound>,
}

#[derive(Serialize, Deserialize)]
struct GenericRound {
    q: String,
    a: String,
}

fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in raw.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(raw.len());
        }
        offset += l.len() + 1;
    }
    raw.len()
}

fn decode<'a, T: Deserialize<'a>>(raw: &'a [u8]) -> Result<T, DatasetError> {
    serde_json::from_slice(raw).map_err(|e| DatasetError::Json {
        offset: byte_offset(raw, e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Parses a dataset file in the given layout.
pub fn parse_dataset(raw: &[u8], format: DatasetFormat) -> Result<Dataset, DatasetError> {
    let dialogues = match format {
        DatasetFormat::Coqa => {
            let file: CoqaFile = decode(raw)?;
            file.data.into_iter().map(coqa_dialogue).collect::<Result<Vec<_>, _>>()?
        }
        DatasetFormat::Generic => {
            let file: GenericFile = decode(raw)?;
            file.dialogues
                .into_iter()
                .map(|rec| {
                    let mut d = Dialogue::from_pairs(rec.dialogue_id, rec.rounds.into_iter().map(|r| (r.q, r.a)));
                    d.story = rec.story;
                    d
                })
                .collect()
        }
    };
    Dataset::new(dialogues, format.to_string())
}

fn coqa_dialogue(rec: CoqaRecord) -> Result<Dialogue, DatasetError> {
    let mut answers: BTreeMap<i64, String> = BTreeMap::new();
    for a in rec.answers {
        if answers.insert(a.turn_id, a.input_text).is_some() {
            return Err(DatasetError::TurnPairing {
                dialogue_id: rec.id,
                detail: format!("answer turn {} appears twice", a.turn_id),
            });
        }
    }
    let mut questions: BTreeMap<i64, String> = BTreeMap::new();
    for q in rec.questions {
        if questions.insert(q.turn_id, q.input_text).is_some() {
            return Err(DatasetError::TurnPairing {
                dialogue_id: rec.id,
                detail: format!("question turn {} appears twice", q.turn_id),
            });
        }
    }
    let unpaired: Vec<i64> = questions
        .keys()
        .filter(|t| !answers.contains_key(t))
        .chain(answers.keys().filter(|t| !questions.contains_key(t)))
        .copied()
        .collect();
    if !unpaired.is_empty() {
        return Err(DatasetError::TurnPairing {
            dialogue_id: rec.id,
            detail: format!("unpaired turn ids {unpaired:?}"),
        });
    }
    let pairs = questions
        .into_iter()
        .map(|(turn, q)| (q, answers.remove(&turn).unwrap_or_default()));
    Ok(Dialogue::from_pairs(rec.id, pairs).with_story(rec.story))
}

/// Serializes a dataset in the generic layout.
pub fn to_generic_json(dataset: &Dataset) -> String {
    let file = GenericFile {
        dialogues: dataset
            .dialogues
            .iter()
            .map(|d| GenericRecord {
                dialogue_id: d.dialogue_id.clone(),
                story: d.story.clone(),
                rounds: d
                    .rounds
                    .iter()
                    .map(|r| GenericRound {
                        q: r.question.clone(),
                        a: r.gold_answer.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("dataset serialization is infallible")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    NoRounds,
    EmptyQuestion,
    NonContiguous,
    DuplicateIndex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    pub kind: IssueKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub dialogue_id: String,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

pub fn validate_dialogue(d: &Dialogue) -> ValidationReport {
    let mut issues = Vec::new();
    if d.rounds.is_empty() {
        issues.push(ValidationIssue {
            round: None,
            kind: IssueKind::NoRounds,
        });
    }
    for r in &d.rounds {
        if r.question.trim().is_empty() {
            issues.push(ValidationIssue {
                round: Some(r.index),
                kind: IssueKind::EmptyQuestion,
            });
        }
    }
    let mut seen = HashSet::new();
    for r in &d.rounds {
        if !seen.insert(r.index) {
            issues.push(ValidationIssue {
                round: Some(r.index),
                kind: IssueKind::DuplicateIndex,
            });
        }
    }
    let contiguous = (1..=d.rounds.len()).all(|i| seen.contains(&i)) && seen.len() == d.rounds.len();
    if !contiguous {
        issues.push(ValidationIssue {
            round: None,
            kind: IssueKind::NonContiguous,
        });
    }
    ValidationReport {
        dialogue_id: d.dialogue_id.clone(),
        issues,
    }
}

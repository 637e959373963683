//! Answerability of perturbed rounds and their expected answers.
//!
//! A round is answerable when any of three checks passes, tried in order:
//! the ontology check (the question's missing entities and relations are in
//! its own graph or in the context accumulated from earlier perturbed
//! rounds), the semantic check (every pronoun resolves within earlier rounds)
//! and the story check (every missing entity is referred to by the question's
//! pronoun in the story). Answerable rounds expect the gold answer of their
//! origin round; the rest expect "Unknown".

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coref::{check_semantic, check_story, Coref, CoreferenceClient};
use crate::dialogue::Dialogue;
use crate::error::AnnotationError;
use crate::extract::{DialogueAnalysis, RoundGraphs};
use crate::graph::{graph_difference, ContextAccumulator, EntityKey, InfoGraph};
use crate::perturb::PerturbedDialogue;
use crate::scoring::normalize_answer;

pub const UNKNOWN: &str = "Unknown";

pub const CHECK_ONTOLOGY: &str = "ontology";
pub const CHECK_SEMANTIC: &str = "semantic";
pub const CHECK_STORY: &str = "story";
pub const LOW_CONFIDENCE: &str = "low_confidence";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerabilityStatus {
    SelfResolvable,
    ContextResolved,
    StoryResolvable,
    SemanticResolved,
    Unresolved,
}

impl AnswerabilityStatus {
    pub fn is_answerable(self) -> bool {
        self != AnswerabilityStatus::Unresolved
    }
}

impl fmt::Display for AnswerabilityStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnswerabilityStatus::SelfResolvable => "self_resolvable",
            AnswerabilityStatus::ContextResolved => "context_resolved",
            AnswerabilityStatus::StoryResolvable => "story_resolvable",
            AnswerabilityStatus::SemanticResolved => "semantic_resolved",
            AnswerabilityStatus::Unresolved => "unresolved",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerabilityVerdict {
    pub status: AnswerabilityStatus,
    /// Information the round still lacks; empty unless unresolved.
    pub missing: InfoGraph,
    pub checks_run: BTreeSet<String>,
    /// For context-resolved rounds: how many rounds back the oldest piece of
    /// needed context was last mentioned.
    pub antecedent_distance: Option<usize>,
}

impl AnswerabilityVerdict {
    fn new(status: AnswerabilityStatus, missing: InfoGraph) -> Self {
        AnswerabilityVerdict {
            status,
            missing,
            checks_run: BTreeSet::from([CHECK_ONTOLOGY.to_string()]),
            antecedent_distance: None,
        }
    }

    pub fn is_answerable(&self) -> bool {
        self.status.is_answerable()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedAnswer {
    pub text: String,
    pub answerable: bool,
}

/// Fields appended to each perturbed round once tagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAnnotation {
    pub answerable: bool,
    pub verdict: AnswerabilityStatus,
    pub expected_answer: String,
    pub missing: Vec<EntityKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antecedent_distance: Option<usize>,
    #[serde(default)]
    pub checks: Vec<String>,
    /// The gold answer itself reads "unknown" although the round is answerable.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub gold_unknown: bool,
}

impl RoundAnnotation {
    pub fn expected(&self) -> ExpectedAnswer {
        ExpectedAnswer {
            text: self.expected_answer.clone(),
            answerable: self.answerable,
        }
    }
}

/// Set-inclusion verdict for one round given the context before it.
///
/// A relation of the full question that is absent from context still counts
/// as covered when both of its endpoints are known from the question or the
/// context.
pub fn check_ontology(question: &InfoGraph, full_question: &InfoGraph, context: &InfoGraph) -> AnswerabilityVerdict {
    let same = question.entity_keys().eq(full_question.entity_keys())
        && question.relation_keys().eq(full_question.relation_keys());
    if same {
        return AnswerabilityVerdict::new(AnswerabilityStatus::SelfResolvable, InfoGraph::new());
    }
    let diff = graph_difference(full_question, question);
    let known = |k: &EntityKey| context.contains_entity(k) || question.contains_entity(k);
    let mut missing = InfoGraph::new();
    for e in diff.entities().filter(|e| !context.contains_entity(&e.key())) {
        missing.insert_entity(e.clone());
    }
    for r in diff.relations() {
        if !context.contains_relation(&r.key()) && !(known(&r.source) && known(&r.target)) {
            missing.insert_relation_unchecked(r.clone());
        }
    }
    if missing.is_empty() {
        AnswerabilityVerdict::new(AnswerabilityStatus::ContextResolved, InfoGraph::new())
    } else {
        AnswerabilityVerdict::new(AnswerabilityStatus::Unresolved, missing)
    }
}

/// Largest distance, over the needed context elements, back to the most
/// recent earlier round that mentions the element.
fn antecedent_distance(position: usize, needed: &InfoGraph, per_round: &[InfoGraph]) -> Option<usize> {
    let mut worst: Option<usize> = None;
    let latest = |has: &dyn Fn(&InfoGraph) -> bool| (1..position).rev().find(|q| has(&per_round[q - 1]));
    for k in needed.entity_keys() {
        let q = latest(&|g: &InfoGraph| g.contains_entity(k))?;
        worst = Some(worst.unwrap_or(0).max(position - q));
    }
    for k in needed.relation_keys() {
        if let Some(q) = latest(&|g: &InfoGraph| g.contains_relation(k)) {
            worst = Some(worst.unwrap_or(0).max(position - q));
        }
    }
    worst
}

/// Answerability verdict for every round of a perturbed dialogue, in order.
pub fn tag_rounds(
    pd: &PerturbedDialogue,
    dialogue: &Dialogue,
    analysis: &DialogueAnalysis,
    coref_remote: Option<&dyn CoreferenceClient>,
) -> Result<Vec<AnswerabilityVerdict>, AnnotationError> {
    let unknown_origin = |origin_index| AnnotationError::UnknownOrigin {
        dialogue_id: pd.source_dialogue_id.clone(),
        origin_index,
    };
    let graphs: Vec<&RoundGraphs> = pd
        .rounds
        .iter()
        .map(|r| analysis.round(r.provenance.origin_index).ok_or_else(|| unknown_origin(r.provenance.origin_index)))
        .collect::<Result<_, _>>()?;
    let per_round: Vec<InfoGraph> = graphs.iter().map(|g| g.explicit()).collect();
    let acc = ContextAccumulator::new(per_round.clone());
    let coref = Coref::with_remote(coref_remote, &analysis.whole);
    let mut prior_text: Vec<String> = Vec::new();
    let mut verdicts = Vec::with_capacity(pd.len());
    for (i, (round, g)) in pd.rounds.iter().zip(&graphs).enumerate() {
        let position = i + 1;
        let origin = dialogue
            .round(round.provenance.origin_index)
            .ok_or_else(|| unknown_origin(round.provenance.origin_index))?;
        let context = acc.context_before(position);
        let mut verdict = check_ontology(&g.question, &g.full_question, context);
        match verdict.status {
            AnswerabilityStatus::ContextResolved => {
                let needed = graph_difference(&g.full_question, &g.question);
                verdict.antecedent_distance = antecedent_distance(position, &needed, &per_round);
            }
            AnswerabilityStatus::Unresolved => {
                verdict.checks_run.insert(CHECK_SEMANTIC.into());
                let semantic = check_semantic(&round.question, &prior_text, &coref);
                if semantic.low_confidence {
                    verdict.checks_run.insert(LOW_CONFIDENCE.into());
                }
                if semantic.positive {
                    verdict.status = AnswerabilityStatus::SemanticResolved;
                    verdict.missing = InfoGraph::new();
                } else if dialogue.story.is_some() {
                    verdict.checks_run.insert(CHECK_STORY.into());
                    let story = check_story(&round.question, &verdict.missing, dialogue.story.as_deref(), &coref);
                    if story.low_confidence {
                        verdict.checks_run.insert(LOW_CONFIDENCE.into());
                    }
                    if story.positive {
                        verdict.status = AnswerabilityStatus::StoryResolvable;
                        verdict.missing = InfoGraph::new();
                    }
                }
            }
            _ => {}
        }
        prior_text.push(origin.question.clone());
        prior_text.push(origin.gold_answer.clone());
        verdicts.push(verdict);
    }
    Ok(verdicts)
}

/// Writes verdicts and expected answers into the perturbed dialogue.
pub fn assign_expected(
    mut pd: PerturbedDialogue,
    verdicts: &[AnswerabilityVerdict],
    dialogue: &Dialogue,
) -> Result<PerturbedDialogue, AnnotationError> {
    for (i, round) in pd.rounds.iter_mut().enumerate() {
        let verdict = verdicts.get(i).ok_or_else(|| AnnotationError::MissingVerdict {
            dialogue_id: pd.source_dialogue_id.clone(),
            new_index: round.provenance.new_index,
        })?;
        let gold = dialogue
            .round(round.provenance.origin_index)
            .ok_or_else(|| AnnotationError::UnknownOrigin {
                dialogue_id: pd.source_dialogue_id.clone(),
                origin_index: round.provenance.origin_index,
            })?;
        let answerable = verdict.is_answerable();
        round.annotation = Some(RoundAnnotation {
            answerable,
            verdict: verdict.status,
            expected_answer: if answerable {
                gold.gold_answer.clone()
            } else {
                UNKNOWN.to_string()
            },
            missing: verdict.missing.entity_keys().cloned().collect(),
            antecedent_distance: verdict.antecedent_distance,
            checks: verdict.checks_run.iter().cloned().collect(),
            gold_unknown: answerable && normalize_answer(&gold.gold_answer) == "unknown",
        });
    }
    Ok(pd)
}

pub fn annotate(
    pd: PerturbedDialogue,
    dialogue: &Dialogue,
    analysis: &DialogueAnalysis,
    coref_remote: Option<&dyn CoreferenceClient>,
) -> Result<PerturbedDialogue, AnnotationError> {
    let verdicts = tag_rounds(&pd, dialogue, analysis, coref_remote)?;
    assign_expected(pd, &verdicts, dialogue)
}

/// Annotates many perturbed dialogues in parallel; order is preserved.
pub fn annotate_all(
    perturbed: Vec<PerturbedDialogue>,
    dialogues: &HashMap<String, &Dialogue>,
    analyses: &HashMap<String, DialogueAnalysis>,
    coref_remote: Option<&dyn CoreferenceClient>,
) -> Result<Vec<PerturbedDialogue>, AnnotationError> {
    perturbed
        .into_par_iter()
        .map(|pd| {
            let id = pd.source_dialogue_id.clone();
            let d = dialogues
                .get(&id)
                .ok_or_else(|| AnnotationError::MissingAnalysis(id.clone()))?;
            let a = analyses.get(&id).ok_or_else(|| AnnotationError::MissingAnalysis(id.clone()))?;
            annotate(pd, d, a, coref_remote)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Entity, Relation};

    fn tea() -> Entity {
        Entity::new("Plant", "Tea")
    }
    fn shen() -> Entity {
        Entity::new("Person", "Shen Nong")
    }
    fn country() -> Entity {
        Entity::new("Country", "Country")
    }
    fn india() -> Entity {
        Entity::new("Country", "India")
    }
    fn g(es: &[Entity]) -> InfoGraph {
        InfoGraph::from_entities(es.iter().cloned())
    }

    #[test]
    fn ontology_context_resolved() {
        let v = check_ontology(&g(&[country()]), &g(&[country(), tea()]), &g(&[tea()]));
        assert_eq!(v.status, AnswerabilityStatus::ContextResolved);
        assert!(v.missing.is_empty());
    }

    #[test]
    fn ontology_unresolved_reports_missing() {
        let v = check_ontology(&g(&[]), &g(&[tea(), shen()]), &g(&[tea(), country(), india()]));
        assert_eq!(v.status, AnswerabilityStatus::Unresolved);
        assert_eq!(v.missing.entity_keys().cloned().collect::<Vec<_>>(), vec![shen().key()]);
    }

    #[test]
    fn ontology_self_resolvable_ignores_context() {
        let v = check_ontology(&g(&[tea()]), &g(&[tea()]), &InfoGraph::new());
        assert_eq!(v.status, AnswerabilityStatus::SelfResolvable);
    }

    #[test]
    fn relation_with_known_endpoints_is_not_missing() {
        let q = g(&[country()]);
        let mut full = g(&[country(), tea()]);
        full.add_relation(Relation::new(tea().key(), country().key(), "grown in")).unwrap();
        let v = check_ontology(&q, &full, &g(&[tea()]));
        assert_eq!(v.status, AnswerabilityStatus::ContextResolved);
        let v = check_ontology(&q, &full, &InfoGraph::new());
        assert_eq!(v.status, AnswerabilityStatus::Unresolved);
        assert_eq!(v.missing.relation_count(), 1);
    }

    #[test]
    fn antecedent_distance_takes_oldest_needed_element() {
        let rounds = vec![g(&[shen()]), g(&[tea()]), g(&[]), g(&[])];
        assert_eq!(antecedent_distance(4, &g(&[tea()]), &rounds), Some(2));
        assert_eq!(antecedent_distance(4, &g(&[tea(), shen()]), &rounds), Some(3));
        assert_eq!(antecedent_distance(4, &g(&[india()]), &rounds), None);
    }

    #[test]
    fn missing_verdict_is_an_error() {
        let d = Dialogue::from_pairs("d", [("q1", "a1")]);
        let pd = PerturbedDialogue::identity(&d);
        assert!(matches!(
            assign_expected(pd, &[], &d),
            Err(AnnotationError::MissingVerdict { .. })
        ));
    }
}

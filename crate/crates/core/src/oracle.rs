//! Metamorphic relation checks over run transcripts.
//!
//! MR1 compares each answer with its expected answer (or with "Unknown" for
//! unanswerable rounds). MR2 and MR3 compare generated answers of the same
//! origin question with each other and never look at expected text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answerability::UNKNOWN;
use crate::perturb::PerturbationKind;
use crate::scoring::Scorer;
use crate::sut::{RoundOutcome, SeedKey};

pub const DEFAULT_EPS_A: f64 = 0.6;
pub const DEFAULT_EPS_B: f64 = 0.6;
pub const CRITICAL_MSS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mr {
    #[serde(rename = "MR1")]
    Mr1,
    #[serde(rename = "MR2")]
    Mr2,
    #[serde(rename = "MR3")]
    Mr3,
}

impl Mr {
    pub const ALL: [Mr; 3] = [Mr::Mr1, Mr::Mr2, Mr::Mr3];
}

impl fmt::Display for Mr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mr::Mr1 => "MR1",
            Mr::Mr2 => "MR2",
            Mr::Mr3 => "MR3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Critical,
    Normal,
}

pub fn severity(mr: Mr, mss_at_conflict: f64) -> Severity {
    if mr == Mr::Mr1 && mss_at_conflict < CRITICAL_MSS {
        Severity::Critical
    } else {
        Severity::Normal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugRecord {
    pub mr: Mr,
    pub seed_key: SeedKey,
    pub evidence: Vec<RoundOutcome>,
    pub mss_at_conflict: f64,
    pub severity: Severity,
}

impl BugRecord {
    fn new(mr: Mr, seed_key: SeedKey, evidence: Vec<RoundOutcome>, mss_at_conflict: f64) -> Self {
        BugRecord {
            mr,
            seed_key,
            evidence,
            mss_at_conflict,
            severity: severity(mr, mss_at_conflict),
        }
    }

    /// Perturbation kind of the first evidence outcome.
    pub fn kind(&self) -> Option<PerturbationKind> {
        self.evidence.first().map(|o| o.kind)
    }
}

/// Bugs of one relation with the scores of every comparison made.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MrDetection {
    pub bugs: Vec<BugRecord>,
    /// MSS of each comparable unit (round for MR1, pair otherwise), tagged
    /// with the kind of its first outcome.
    pub unit_scores: Vec<(PerturbationKind, f64)>,
    /// Outcomes left out for lack of an expected answer or annotation.
    pub skipped: usize,
}

impl MrDetection {
    pub fn comparable_units(&self) -> usize {
        self.unit_scores.len()
    }
}

fn order_key(o: &RoundOutcome) -> (PerturbationKind, &str, usize, usize) {
    (o.kind, o.dialogue_id.as_str(), o.new_index, o.origin_index)
}

/// MR1 conflicts. Failed rounds are neither compared nor skipped; the
/// caller counts them from the transcript.
pub fn detect_mr1(outcomes: &[RoundOutcome], eps_a: f64, scorer: &Scorer) -> MrDetection {
    let results: Vec<Option<(PerturbationKind, f64, Option<BugRecord>)>> = outcomes
        .par_iter()
        .filter(|o| !o.failed())
        .map(|o| {
            let expected = o.expected.as_ref().filter(|e| !e.text.trim().is_empty())?;
            let generated = o.generated.as_deref().unwrap_or_default();
            let target = if expected.answerable { expected.text.as_str() } else { UNKNOWN };
            let m = scorer.mss(generated, target);
            let bug = (m < eps_a).then(|| BugRecord::new(Mr::Mr1, o.seed_key(), vec![o.clone()], m));
            Some((o.kind, m, bug))
        })
        .collect();
    let mut det = MrDetection::default();
    for r in results {
        match r {
            Some((kind, m, bug)) => {
                det.unit_scores.push((kind, m));
                det.bugs.extend(bug);
            }
            None => det.skipped += 1,
        }
    }
    det
}

/// Outcomes of one origin question, split by answerability.
#[derive(Debug, Clone, Default)]
pub struct SeedGroup<'a> {
    pub seed_key: SeedKey,
    pub answerable: Vec<&'a RoundOutcome>,
    pub unanswerable: Vec<&'a RoundOutcome>,
}

/// Groups successful, annotated outcomes by seed key. With `cross_kind`
/// false, each perturbation kind forms its own groups.
pub fn group_by_seed(outcomes: &[RoundOutcome], cross_kind: bool) -> Vec<SeedGroup<'_>> {
    let mut groups: BTreeMap<(SeedKey, Option<PerturbationKind>), SeedGroup<'_>> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| !o.failed()) {
        let Some(answerable) = o.answerable() else { continue };
        let kind = (!cross_kind).then_some(o.kind);
        let g = groups.entry((o.seed_key(), kind)).or_insert_with(|| SeedGroup {
            seed_key: o.seed_key(),
            ..Default::default()
        });
        if answerable {
            g.answerable.push(o);
        } else {
            g.unanswerable.push(o);
        }
    }
    groups
        .into_values()
        .map(|mut g| {
            g.answerable.sort_by(|a, b| order_key(a).cmp(&order_key(b)));
            g.unanswerable.sort_by(|a, b| order_key(a).cmp(&order_key(b)));
            g
        })
        .collect()
}

fn pair_mss(scorer: &Scorer, a: &RoundOutcome, b: &RoundOutcome) -> f64 {
    scorer.mss(
        a.generated.as_deref().unwrap_or_default(),
        b.generated.as_deref().unwrap_or_default(),
    )
}

fn same_answerability_pairs<'a>(side: &[&'a RoundOutcome]) -> Vec<(&'a RoundOutcome, &'a RoundOutcome)> {
    let mut pairs = Vec::new();
    for i in 0..side.len() {
        for j in i + 1..side.len() {
            pairs.push((side[i], side[j]));
        }
    }
    pairs
}

/// MR2: answers to one question with equal answerability must agree.
pub fn detect_mr2(groups: &[SeedGroup<'_>], eps_b: f64, scorer: &Scorer) -> MrDetection {
    let per_group: Vec<Vec<(PerturbationKind, f64, Option<BugRecord>)>> = groups
        .par_iter()
        .map(|g| {
            let mut pairs = same_answerability_pairs(&g.answerable);
            pairs.extend(same_answerability_pairs(&g.unanswerable));
            pairs
                .into_iter()
                .map(|(a, b)| {
                    let m = pair_mss(scorer, a, b);
                    let bug = (m < eps_b)
                        .then(|| BugRecord::new(Mr::Mr2, g.seed_key.clone(), vec![a.clone(), b.clone()], m));
                    (a.kind, m, bug)
                })
                .collect()
        })
        .collect();
    collect_pairs(per_group)
}

/// MR3: answers to one question with different answerability must differ.
pub fn detect_mr3(groups: &[SeedGroup<'_>], eps_b: f64, scorer: &Scorer) -> MrDetection {
    let per_group: Vec<Vec<(PerturbationKind, f64, Option<BugRecord>)>> = groups
        .par_iter()
        .map(|g| {
            let mut out = Vec::with_capacity(g.answerable.len() * g.unanswerable.len());
            for a in &g.answerable {
                for u in &g.unanswerable {
                    let m = pair_mss(scorer, a, u);
                    let bug = (m > eps_b)
                        .then(|| BugRecord::new(Mr::Mr3, g.seed_key.clone(), vec![(*a).clone(), (*u).clone()], m));
                    out.push((a.kind, m, bug));
                }
            }
            out
        })
        .collect();
    collect_pairs(per_group)
}

fn collect_pairs(per_group: Vec<Vec<(PerturbationKind, f64, Option<BugRecord>)>>) -> MrDetection {
    let mut det = MrDetection::default();
    for (kind, m, bug) in per_group.into_iter().flatten() {
        det.unit_scores.push((kind, m));
        det.bugs.extend(bug);
    }
    det
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub eps_a: f64,
    pub eps_b: f64,
    pub cross_kind: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            eps_a: DEFAULT_EPS_A,
            eps_b: DEFAULT_EPS_B,
            cross_kind: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Detection {
    pub mr1: MrDetection,
    pub mr2: MrDetection,
    pub mr3: MrDetection,
    pub failed_rounds: usize,
}

impl Detection {
    pub fn get(&self, mr: Mr) -> &MrDetection {
        match mr {
            Mr::Mr1 => &self.mr1,
            Mr::Mr2 => &self.mr2,
            Mr::Mr3 => &self.mr3,
        }
    }

    /// Every conflict, in MR order.
    pub fn bugs(&self) -> impl Iterator<Item = &BugRecord> {
        Mr::ALL.into_iter().flat_map(move |mr| self.get(mr).bugs.iter())
    }
}

pub fn detect(outcomes: &[RoundOutcome], cfg: &DetectConfig, scorer: &Scorer) -> Detection {
    let groups = group_by_seed(outcomes, cfg.cross_kind);
    Detection {
        mr1: detect_mr1(outcomes, cfg.eps_a, scorer),
        mr2: detect_mr2(&groups, cfg.eps_b, scorer),
        mr3: detect_mr3(&groups, cfg.eps_b, scorer),
        failed_rounds: outcomes.iter().filter(|o| o.failed()).count(),
    }
}

/// Keeps one record per `(mr, seed_key)`, the one furthest past the
/// threshold (lowest MSS, or highest for MR3).
pub fn dedup(bugs: &[BugRecord]) -> Vec<BugRecord> {
    let mut best: BTreeMap<(Mr, SeedKey), &BugRecord> = BTreeMap::new();
    for b in bugs {
        best.entry((b.mr, b.seed_key.clone()))
            .and_modify(|cur| {
                let worse = if b.mr == Mr::Mr3 {
                    b.mss_at_conflict > cur.mss_at_conflict
                } else {
                    b.mss_at_conflict < cur.mss_at_conflict
                };
                if worse {
                    *cur = b;
                }
            })
            .or_insert(b);
    }
    best.into_values().cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrSummary {
    pub mr: Mr,
    pub unique_bugs: usize,
    pub conflicts: usize,
    pub comparable_units: usize,
    /// Unique bugs per comparable unit; absent when nothing was comparable.
    pub rate: Option<f64>,
    /// Mean MSS over all comparable units.
    pub mean_mss: Option<f64>,
    /// Mean MSS over unique bugs.
    pub bug_mss: Option<f64>,
    pub critical: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnitTotals {
    pub comparable_units: usize,
    pub mss_sum: f64,
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize_mr(mr: Mr, bugs: &[BugRecord], totals: UnitTotals) -> MrSummary {
    let own: Vec<BugRecord> = bugs.iter().filter(|b| b.mr == mr).cloned().collect();
    let unique = dedup(&own);
    let bug_sum: f64 = unique.iter().map(|b| b.mss_at_conflict).sum();
    MrSummary {
        mr,
        unique_bugs: unique.len(),
        conflicts: own.len(),
        comparable_units: totals.comparable_units,
        rate: (totals.comparable_units > 0).then(|| unique.len() as f64 / totals.comparable_units as f64),
        mean_mss: mean(totals.mss_sum, totals.comparable_units),
        bug_mss: mean(bug_sum, unique.len()),
        critical: unique.iter().filter(|b| b.severity == Severity::Critical).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugSummary {
    pub per_mr: Vec<MrSummary>,
    pub skipped_rounds: usize,
    pub failed_rounds: usize,
}

impl BugSummary {
    pub fn get(&self, mr: Mr) -> Option<&MrSummary> {
        self.per_mr.iter().find(|s| s.mr == mr)
    }

    pub fn unique(&self, mr: Mr) -> usize {
        self.get(mr).map_or(0, |s| s.unique_bugs)
    }
}

pub fn summarize_bugs(bugs: &[BugRecord], totals: &BTreeMap<Mr, UnitTotals>) -> BugSummary {
    BugSummary {
        per_mr: Mr::ALL
            .into_iter()
            .map(|mr| summarize_mr(mr, bugs, totals.get(&mr).copied().unwrap_or_default()))
            .collect(),
        skipped_rounds: 0,
        failed_rounds: 0,
    }
}

fn totals_of(det: &MrDetection, kind: Option<PerturbationKind>) -> UnitTotals {
    det.unit_scores
        .iter()
        .filter(|(k, _)| kind.is_none_or(|want| *k == want))
        .fold(UnitTotals::default(), |t, (_, m)| UnitTotals {
            comparable_units: t.comparable_units + 1,
            mss_sum: t.mss_sum + m,
        })
}

pub fn summarize(det: &Detection) -> BugSummary {
    let totals: BTreeMap<Mr, UnitTotals> = Mr::ALL.into_iter().map(|mr| (mr, totals_of(det.get(mr), None))).collect();
    let bugs: Vec<BugRecord> = det.bugs().cloned().collect();
    BugSummary {
        skipped_rounds: det.mr1.skipped,
        failed_rounds: det.failed_rounds,
        ..summarize_bugs(&bugs, &totals)
    }
}

/// Summary restricted to units and bugs whose first outcome has `kind`.
pub fn summarize_kind(det: &Detection, kind: PerturbationKind) -> BugSummary {
    let totals: BTreeMap<Mr, UnitTotals> =
        Mr::ALL.into_iter().map(|mr| (mr, totals_of(det.get(mr), Some(kind)))).collect();
    let bugs: Vec<BugRecord> = det.bugs().filter(|b| b.kind() == Some(kind)).cloned().collect();
    summarize_bugs(&bugs, &totals)
}

/// Seed keys of unique critical bugs.
pub fn critical_seeds(bugs: &[BugRecord]) -> BTreeSet<SeedKey> {
    bugs.iter()
        .filter(|b| b.severity == Severity::Critical)
        .map(|b| b.seed_key.clone())
        .collect()
}

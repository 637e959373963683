//! Tables over annotated datasets, bug summaries and bug-set overlaps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::oracle::{BugSummary, Mr};
use crate::perturb::{PerturbationKind, PerturbedDialogue};
use crate::sut::SeedKey;

/// Version of the CSV and JSON report layouts.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub kind: PerturbationKind,
    pub total_rounds: usize,
    pub unanswerable_rounds: usize,
    pub total_dialogues: usize,
    pub dialogues_with_unanswerable: usize,
    /// Dialogues with an unanswerable round over all dialogues.
    pub ratio: Option<f64>,
}

impl DatasetSummary {
    fn empty(kind: PerturbationKind) -> Self {
        DatasetSummary {
            kind,
            total_rounds: 0,
            unanswerable_rounds: 0,
            total_dialogues: 0,
            dialogues_with_unanswerable: 0,
            ratio: None,
        }
    }

    fn add(&mut self, pd: &PerturbedDialogue) {
        let unanswerable = pd
            .rounds
            .iter()
            .filter(|r| r.annotation.as_ref().is_some_and(|a| !a.answerable))
            .count();
        self.total_rounds += pd.len();
        self.unanswerable_rounds += unanswerable;
        self.total_dialogues += 1;
        self.dialogues_with_unanswerable += usize::from(unanswerable > 0);
        self.ratio = Some(self.dialogues_with_unanswerable as f64 / self.total_dialogues as f64);
    }
}

/// One column per perturbation kind, in kind order.
pub fn dataset_summary(dialogues: &[PerturbedDialogue]) -> Vec<DatasetSummary> {
    let mut cols: BTreeMap<PerturbationKind, DatasetSummary> = BTreeMap::new();
    for pd in dialogues {
        cols.entry(pd.kind).or_insert_with(|| DatasetSummary::empty(pd.kind)).add(pd);
    }
    cols.into_values().collect()
}

fn pct(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".into(), |r| format!("{:.1}%", r * 100.0))
}

fn num(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |x| format!("{x:.3}"))
}

fn text_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{:<w$}", c, w = widths[i]);
            } else {
                let _ = write!(s, "  {:>w$}", c, w = widths[i]);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len().saturating_sub(1))));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        // Writing into memory cannot fail.
        let _ = w.write_record(r);
    }
    String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
}

const SUMMARY_ROWS: [&str; 5] = [
    "Total rounds",
    "Unanswerable rounds",
    "Total dialogues",
    "Dialogues with unanswerable",
    "Ratio",
];

fn summary_grid(cols: &[DatasetSummary], pct_ratio: bool) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec![String::new()];
    header.extend(cols.iter().map(|c| c.kind.to_string()));
    let rows = SUMMARY_ROWS
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut row = vec![name.to_string()];
            row.extend(cols.iter().map(|c| match i {
                0 => c.total_rounds.to_string(),
                1 => c.unanswerable_rounds.to_string(),
                2 => c.total_dialogues.to_string(),
                3 => c.dialogues_with_unanswerable.to_string(),
                _ if pct_ratio => pct(c.ratio),
                _ => c.ratio.map_or_else(String::new, |r| format!("{r:.6}")),
            }));
            row
        })
        .collect();
    (header, rows)
}

pub fn dataset_summary_text(cols: &[DatasetSummary]) -> String {
    let (h, r) = summary_grid(cols, true);
    text_table(&h, &r)
}

pub fn dataset_summary_csv(cols: &[DatasetSummary]) -> String {
    let (h, r) = summary_grid(cols, false);
    csv(&h, &r)
}

/// Bug summary of one system on one perturbation kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrCell {
    pub sut: String,
    pub kind: PerturbationKind,
    pub summary: BugSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrTableRow {
    pub sut: String,
    pub kind: PerturbationKind,
    pub mr: Mr,
    pub mss: Option<f64>,
    pub bug_mss: Option<f64>,
    pub rate: Option<f64>,
    pub unique_bugs: usize,
    pub critical: usize,
    pub comparable_units: usize,
}

pub fn mr_table(cells: &[MrCell]) -> Vec<MrTableRow> {
    let mut rows = Vec::new();
    for c in cells {
        for s in &c.summary.per_mr {
            rows.push(MrTableRow {
                sut: c.sut.clone(),
                kind: c.kind,
                mr: s.mr,
                mss: s.mean_mss,
                bug_mss: s.bug_mss,
                rate: s.rate,
                unique_bugs: s.unique_bugs,
                critical: s.critical,
                comparable_units: s.comparable_units,
            });
        }
    }
    rows.sort_by(|a, b| (&a.sut, a.kind, a.mr).cmp(&(&b.sut, b.kind, b.mr)));
    rows
}

fn mr_grid(rows: &[MrTableRow], precise: bool) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["SUT", "Perturbation", "MR", "MSS", "BugS", "Rate", "Bugs", "Critical", "Units"]
        .map(String::from)
        .to_vec();
    let f = |x: Option<f64>| {
        if precise {
            x.map_or_else(String::new, |x| format!("{x:.6}"))
        } else {
            num(x)
        }
    };
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.sut.clone(),
                r.kind.to_string(),
                r.mr.to_string(),
                f(r.mss),
                f(r.bug_mss),
                f(r.rate),
                r.unique_bugs.to_string(),
                r.critical.to_string(),
                r.comparable_units.to_string(),
            ]
        })
        .collect();
    (header, body)
}

pub fn mr_table_text(rows: &[MrTableRow]) -> String {
    let (h, r) = mr_grid(rows, false);
    text_table(&h, &r)
}

pub fn mr_table_csv(rows: &[MrTableRow]) -> String {
    let (h, r) = mr_grid(rows, true);
    csv(&h, &r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub left: String,
    pub right: String,
    pub common: usize,
    pub only_left: usize,
    pub only_right: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub sizes: BTreeMap<String, usize>,
    pub pairs: Vec<PairOverlap>,
    /// Keys present in every set.
    pub common_all: usize,
    /// Keys found by exactly one set, per set.
    pub unique: BTreeMap<String, usize>,
    pub union: usize,
}

/// Venn-style counts over named sets of seed keys.
pub fn overlap(sets: &[(String, BTreeSet<SeedKey>)]) -> Overlap {
    let mut pairs = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let (ln, l) = &sets[i];
            let (rn, r) = &sets[j];
            pairs.push(PairOverlap {
                left: ln.clone(),
                right: rn.clone(),
                common: l.intersection(r).count(),
                only_left: l.difference(r).count(),
                only_right: r.difference(l).count(),
            });
        }
    }
    let union: BTreeSet<&SeedKey> = sets.iter().flat_map(|(_, s)| s.iter()).collect();
    let common_all = union
        .iter()
        .filter(|k| sets.iter().all(|(_, s)| s.contains(**k)))
        .count();
    let unique = sets
        .iter()
        .map(|(name, s)| {
            let n = s
                .iter()
                .filter(|k| sets.iter().filter(|(_, o)| o.contains(*k)).count() == 1)
                .count();
            (name.clone(), n)
        })
        .collect();
    Overlap {
        sizes: sets.iter().map(|(n, s)| (n.clone(), s.len())).collect(),
        pairs,
        common_all: if sets.is_empty() { 0 } else { common_all },
        unique,
        union: union.len(),
    }
}

pub fn overlap_text(o: &Overlap) -> String {
    let mut out = String::new();
    for (name, n) in &o.sizes {
        let _ = writeln!(out, "{name}: {n} keys, {} unique", o.unique.get(name).copied().unwrap_or(0));
    }
    for p in &o.pairs {
        let _ = writeln!(
            out,
            "{} vs {}: common {}, only {} {}, only {} {}",
            p.left, p.right, p.common, p.left, p.only_left, p.right, p.only_right
        );
    }
    let _ = writeln!(out, "common to all: {}, union: {}", o.common_all, o.union);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answerability::{AnswerabilityStatus, RoundAnnotation};
    use crate::perturb::{PerturbedRound, RoundProvenance, GENERATOR};

    fn key(i: usize) -> SeedKey {
        SeedKey {
            dialogue_id: "d".into(),
            origin_index: i,
        }
    }

    fn set(name: &str, ks: &[usize]) -> (String, BTreeSet<SeedKey>) {
        (name.into(), ks.iter().map(|&i| key(i)).collect())
    }

    #[test]
    fn overlap_examples() {
        let o = overlap(&[set("A", &[1, 2]), set("B", &[2])]);
        assert_eq!(o.pairs[0].only_left, 1);
        assert_eq!(o.pairs[0].only_right, 0);
        assert_eq!(o.pairs[0].common, 1);
        let same = overlap(&[set("A", &[1, 2]), set("B", &[1, 2])]);
        assert_eq!(same.common_all, 2);
        assert_eq!(same.unique["A"], 0);
        let disjoint = overlap(&[set("A", &[1]), set("B", &[2])]);
        assert_eq!(disjoint.common_all, 0);
        assert_eq!(disjoint.union, 2);
    }

    fn pd(kind: PerturbationKind, answerable: &[bool]) -> PerturbedDialogue {
        PerturbedDialogue {
            source_dialogue_id: "d".into(),
            kind,
            seed: 0,
            generator: GENERATOR.into(),
            reduce_ratio: 0.3,
            duplicate_ratio: 0.2,
            rounds: answerable
                .iter()
                .enumerate()
                .map(|(i, &a)| PerturbedRound {
                    provenance: RoundProvenance {
                        new_index: i + 1,
                        origin_index: i + 1,
                        duplicated: false,
                    },
                    question: "q".into(),
                    annotation: Some(RoundAnnotation {
                        answerable: a,
                        verdict: if a {
                            AnswerabilityStatus::SelfResolvable
                        } else {
                            AnswerabilityStatus::Unresolved
                        },
                        expected_answer: "x".into(),
                        missing: vec![],
                        antecedent_distance: None,
                        checks: vec![],
                        gold_unknown: false,
                    }),
                })
                .collect(),
        }
    }

    #[test]
    fn summary_counts() {
        let ds = vec![
            pd(PerturbationKind::Shuffle, &[true, false, false]),
            pd(PerturbationKind::Shuffle, &[true, true]),
            pd(PerturbationKind::Reduce, &[true]),
        ];
        let cols = dataset_summary(&ds);
        assert_eq!(cols.len(), 2);
        assert_eq!(cols[0].total_rounds, 5);
        assert_eq!(cols[0].unanswerable_rounds, 2);
        assert_eq!(cols[0].dialogues_with_unanswerable, 1);
        assert_eq!(cols[0].ratio, Some(0.5));
        assert_eq!(cols[1].ratio, Some(0.0));
        let text = dataset_summary_text(&cols);
        assert!(text.contains("50.0%"));
        assert!(dataset_summary_csv(&cols).starts_with(",DS,DR\n"));
    }
}

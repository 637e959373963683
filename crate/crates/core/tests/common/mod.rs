//! Shared fixtures for integration tests.
#![allow(dead_code)]

pub mod server;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use mortar_core::chat::{MockChatClient, MockEntry, MockFixture};
use mortar_core::dialogue::{parse_dataset, Dataset, DatasetFormat, Dialogue};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn tea_dataset() -> Dataset {
    let raw = std::fs::read(fixture_path("tea_dialogue.json")).unwrap();
    parse_dataset(&raw, DatasetFormat::Generic).unwrap()
}

pub fn tea_extractor() -> MockChatClient {
    MockChatClient::from_path(&fixture_path("tea_extractor.json")).unwrap()
}

/// Role of a round in a synthetic dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SynthRound {
    /// Names the dialogue's only person.
    Person,
    /// Names an object; needs no context.
    Thing(String),
    /// Refers to the person by pronoun only.
    Ref,
}

#[derive(Debug, Clone)]
pub struct SynthDialogue {
    pub id: String,
    pub person: String,
    pub rounds: Vec<SynthRound>,
}

impl SynthDialogue {
    pub fn marker(&self) -> String {
        self.id.clone()
    }

    pub fn gold(&self, index: usize) -> String {
        format!("{}item{}", self.id, index)
    }

    fn question(&self, index: usize) -> String {
        match &self.rounds[index - 1] {
            SynthRound::Person => format!("Who is {}?", self.person),
            SynthRound::Thing(t) => format!("What is the {t} used for in case {index}?"),
            SynthRound::Ref => format!("What did he do in year {index}?"),
        }
    }

    fn full_question(&self, index: usize) -> String {
        match &self.rounds[index - 1] {
            SynthRound::Ref => format!("What did {} do in year {index}?", self.person),
            _ => self.question(index),
        }
    }

    pub fn dialogue(&self) -> Dialogue {
        Dialogue::from_pairs(
            self.id.clone(),
            (1..=self.rounds.len()).map(|i| (self.question(i), self.gold(i))),
        )
    }

    pub fn person_round(&self) -> usize {
        self.rounds.iter().position(|r| *r == SynthRound::Person).unwrap() + 1
    }

    pub fn is_ref(&self, origin: usize) -> bool {
        self.rounds[origin - 1] == SynthRound::Ref
    }

    /// Mock extraction replies for this dialogue, keyed by its marker.
    pub fn fixture_entries(&self) -> Vec<MockEntry> {
        let n = self.rounds.len();
        let entry = |function: &str, response: Value| MockEntry {
            function: function.into(),
            contains: Some(self.marker()),
            response: Some(response),
            responses: vec![],
        };
        let declaratives: Vec<String> = (1..=n)
            .map(|i| format!("In {} round {i} the answer is {}.", self.marker(), self.gold(i)))
            .collect();
        let mut entities = vec![json!({"name": self.person, "type": "Person", "description": ""})];
        for r in &self.rounds {
            if let SynthRound::Thing(t) = r {
                entities.push(json!({"name": t, "type": "Object", "description": ""}));
            }
        }
        let full: Vec<Value> = (1..=n)
            .map(|i| json!({"question": self.full_question(i), "answer": self.gold(i)}))
            .collect();
        let selection = |names: Vec<&str>| json!({"entities": names, "relations": []});
        let rounds: Vec<Value> = self
            .rounds
            .iter()
            .map(|r| match r {
                SynthRound::Person => json!({
                    "question": selection(vec![&self.person]),
                    "full_question": selection(vec![&self.person]),
                    "answer": selection(vec![]),
                }),
                SynthRound::Thing(t) => json!({
                    "question": selection(vec![t]),
                    "full_question": selection(vec![t]),
                    "answer": selection(vec![]),
                }),
                SynthRound::Ref => json!({
                    "question": selection(vec![]),
                    "full_question": selection(vec![&self.person]),
                    "answer": selection(vec![]),
                }),
            })
            .collect();
        vec![
            entry("declaratives", json!({ "declaratives": declaratives })),
            entry("topic", json!({"topic": format!("{} events", self.marker())})),
            entry("entity_types", json!({"entity_types": ["Person", "Object"]})),
            entry("graph", json!({"entities": entities, "relations": []})),
            entry("decontextualize", json!({ "rounds": full })),
            entry("round_graph", json!({ "rounds": rounds })),
        ]
    }
}

const PEOPLE: &[&str] = &["Mara Quill", "Oskar Venn", "Lena Hart", "Ivo Strand"];
const THINGS: &[&str] = &["lamp", "engine", "kettle", "compass", "loom", "anvil", "sextant", "bellows"];

/// `n` synthetic dialogues of 3 to 8 rounds, each with one person round,
/// some object rounds and some pronoun rounds.
pub fn synth_world(n: usize, seed: u64) -> Vec<SynthDialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(3..=8);
            let mut things: Vec<&str> = THINGS.to_vec();
            things.shuffle(&mut rng);
            let mut rounds: Vec<SynthRound> = (0..len - 1)
                .map(|j| {
                    if rng.random_bool(0.5) {
                        SynthRound::Ref
                    } else {
                        SynthRound::Thing(things[j % things.len()].to_string())
                    }
                })
                .collect();
            let p = rng.random_range(0..=rounds.len());
            rounds.insert(p, SynthRound::Person);
            SynthDialogue {
                id: format!("dlg{i:03}"),
                person: PEOPLE[rng.random_range(0..PEOPLE.len())].to_string(),
                rounds,
            }
        })
        .collect()
}

pub fn synth_dataset(world: &[SynthDialogue]) -> Dataset {
    Dataset::new(world.iter().map(SynthDialogue::dialogue).collect(), "synthetic").unwrap()
}

pub fn synth_extractor(world: &[SynthDialogue]) -> MockChatClient {
    MockChatClient::new(MockFixture {
        model: "mock-synthetic".into(),
        entries: world.iter().flat_map(SynthDialogue::fixture_entries).collect(),
    })
}

/// Expected tag of each round of `pd`, derived from the dialogue design
/// alone: pronoun rounds are answerable iff the person round occurs earlier,
/// at distance equal to the gap to its latest earlier occurrence.
pub fn brute_force_tags(world: &SynthDialogue, pd: &mortar_core::perturb::PerturbedDialogue) -> Vec<(bool, Option<usize>)> {
    let person = world.person_round();
    pd.rounds
        .iter()
        .enumerate()
        .map(|(p, r)| {
            if !world.is_ref(r.provenance.origin_index) {
                return (true, None);
            }
            let last = pd.rounds[..p]
                .iter()
                .rposition(|prior| prior.provenance.origin_index == person);
            match last {
                Some(q) => (true, Some(p - q)),
                None => (false, None),
            }
        })
        .collect()
}

pub fn outcomes_of(runs: &[mortar_core::sut::DialogueRun]) -> Vec<mortar_core::sut::RoundOutcome> {
    runs.iter().flat_map(|r| r.outcomes.iter().cloned()).collect()
}

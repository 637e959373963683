//! Dialogue-level perturbations of a question sequence.
//!
//! Every perturbation keeps, for each emitted round, the 1-based index of the
//! round it came from in the seed dialogue. Composite kinds (`DSR`, `DSD`) run
//! the shuffle stage first and then reduce or duplicate the shuffled sequence,
//! drawing from one generator so that a single seed fixes the whole result.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answerability::RoundAnnotation;
use crate::dialogue::Dialogue;
use crate::error::ConfigError;

/// Name of the generator recorded next to every seed.
pub const GENERATOR: &str = "chacha8";

pub const DEFAULT_REDUCE_RATIO: f64 = 0.3;
pub const DEFAULT_DUPLICATE_RATIO: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PerturbationKind {
    /// Unperturbed sequence, used as the reference run.
    #[serde(rename = "ORIG")]
    Original,
    #[serde(rename = "DS")]
    Shuffle,
    #[serde(rename = "DR")]
    Reduce,
    #[serde(rename = "DD")]
    Duplicate,
    #[serde(rename = "DSR")]
    ShuffleReduce,
    #[serde(rename = "DSD")]
    ShuffleDuplicate,
}

impl PerturbationKind {
    pub const PERTURBED: [PerturbationKind; 5] = [
        PerturbationKind::Shuffle,
        PerturbationKind::Reduce,
        PerturbationKind::Duplicate,
        PerturbationKind::ShuffleReduce,
        PerturbationKind::ShuffleDuplicate,
    ];

    pub fn code(self) -> &'static str {
        match self {
            PerturbationKind::Original => "ORIG",
            PerturbationKind::Shuffle => "DS",
            PerturbationKind::Reduce => "DR",
            PerturbationKind::Duplicate => "DD",
            PerturbationKind::ShuffleReduce => "DSR",
            PerturbationKind::ShuffleDuplicate => "DSD",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for PerturbationKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ORIG" | "ORIGINAL" => Ok(PerturbationKind::Original),
            "DS" => Ok(PerturbationKind::Shuffle),
            "DR" => Ok(PerturbationKind::Reduce),
            "DD" => Ok(PerturbationKind::Duplicate),
            "DSR" => Ok(PerturbationKind::ShuffleReduce),
            "DSD" => Ok(PerturbationKind::ShuffleDuplicate),
            _ => Err(ConfigError::UnknownPerturbation(s.to_string())),
        }
    }
}

/// A perturbation kind with its ratios and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub kind: PerturbationKind,
    pub reduce_ratio: f64,
    pub duplicate_ratio: f64,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn new(kind: PerturbationKind, seed: u64) -> Self {
        PerturbationConfig {
            kind,
            reduce_ratio: DEFAULT_REDUCE_RATIO,
            duplicate_ratio: DEFAULT_DUPLICATE_RATIO,
            seed,
        }
    }

    pub fn with_ratios(mut self, reduce_ratio: f64, duplicate_ratio: f64) -> Self {
        self.reduce_ratio = reduce_ratio;
        self.duplicate_ratio = duplicate_ratio;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check_ratio(self.reduce_ratio)?;
        check_ratio(self.duplicate_ratio)
    }
}

fn check_ratio(ratio: f64) -> Result<(), ConfigError> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(ConfigError::Ratio(ratio))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundProvenance {
    pub new_index: usize,
    pub origin_index: usize,
    pub duplicated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedRound {
    #[serde(flatten)]
    pub provenance: RoundProvenance,
    pub question: String,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<RoundAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedDialogue {
    pub source_dialogue_id: String,
    pub kind: PerturbationKind,
    pub seed: u64,
    pub generator: String,
    pub reduce_ratio: f64,
    pub duplicate_ratio: f64,
    pub rounds: Vec<PerturbedRound>,
}

impl PerturbedDialogue {
    /// The seed dialogue as an unperturbed sequence.
    pub fn identity(d: &Dialogue) -> Self {
        let rounds = d
            .rounds
            .iter()
            .map(|r| PerturbedRound {
                provenance: RoundProvenance {
                    new_index: r.index,
                    origin_index: r.index,
                    duplicated: false,
                },
                question: r.question.clone(),
                annotation: None,
            })
            .collect();
        PerturbedDialogue {
            source_dialogue_id: d.dialogue_id.clone(),
            kind: PerturbationKind::Original,
            seed: 0,
            generator: GENERATOR.to_string(),
            reduce_ratio: DEFAULT_REDUCE_RATIO,
            duplicate_ratio: DEFAULT_DUPLICATE_RATIO,
            rounds,
        }
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn origins(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.provenance.origin_index).collect()
    }

    /// Number of inserted duplicate rounds (K).
    pub fn duplicated_count(&self) -> usize {
        self.rounds.iter().filter(|r| r.provenance.duplicated).count()
    }

    fn renumber(&mut self) {
        for (i, r) in self.rounds.iter_mut().enumerate() {
            r.provenance.new_index = i + 1;
        }
    }

    fn stamp(mut self, cfg: &PerturbationConfig) -> Self {
        self.kind = cfg.kind;
        self.seed = cfg.seed;
        self.reduce_ratio = cfg.reduce_ratio;
        self.duplicate_ratio = cfg.duplicate_ratio;
        self.renumber();
        self
    }
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives the per-dialogue seed from a run seed so that results do not
/// depend on dialogue order or on which other kinds were generated.
pub fn dialogue_seed(run_seed: u64, dialogue_id: &str, kind: PerturbationKind) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(kind.code().as_bytes());
    h.update([0u8]);
    h.update(dialogue_id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Shuffles the full sequence with a uniform permutation.
pub fn shuffle_stage<R: Rng + ?Sized>(mut pd: PerturbedDialogue, rng: &mut R) -> PerturbedDialogue {
    // Fisher-Yates
    for i in (1..pd.rounds.len()).rev() {
        let j = rng.random_range(0..=i);
        pd.rounds.swap(i, j);
    }
    pd.renumber();
    pd
}

/// Drops each round independently with probability `ratio`, redrawing when
/// nothing survives.
pub fn reduce_stage<R: Rng + ?Sized>(mut pd: PerturbedDialogue, ratio: f64, rng: &mut R) -> PerturbedDialogue {
    if pd.rounds.len() <= 1 {
        return pd;
    }
    let keep = loop {
        let keep: Vec<bool> = (0..pd.rounds.len()).map(|_| !rng.random_bool(ratio)).collect();
        if keep.iter().any(|k| *k) {
            break keep;
        }
    };
    let mut flags = keep.into_iter();
    pd.rounds.retain(|_| flags.next().unwrap_or(false));
    pd.renumber();
    pd
}

/// Selects each round independently with probability `ratio` and inserts one
/// extra copy of it at a uniform position strictly after the original.
pub fn duplicate_stage<R: Rng + ?Sized>(mut pd: PerturbedDialogue, ratio: f64, rng: &mut R) -> PerturbedDialogue {
    let selected: Vec<bool> = (0..pd.rounds.len()).map(|_| rng.random_bool(ratio)).collect();
    let sources: Vec<usize> = (0..pd.rounds.len()).filter(|i| selected[*i]).collect();
    // Track where each original currently sits; insertions shift later slots.
    let mut position: Vec<usize> = (0..pd.rounds.len()).collect();
    for src in sources {
        let at = position[src];
        let insert_at = rng.random_range(at + 1..=pd.rounds.len());
        let mut copy = pd.rounds[at].clone();
        copy.provenance.duplicated = true;
        pd.rounds.insert(insert_at, copy);
        for p in position.iter_mut() {
            if *p >= insert_at {
                *p += 1;
            }
        }
    }
    pd.renumber();
    pd
}

pub fn shuffle(d: &Dialogue, seed: u64) -> PerturbedDialogue {
    let cfg = PerturbationConfig::new(PerturbationKind::Shuffle, seed);
    shuffle_stage(PerturbedDialogue::identity(d), &mut rng_for(seed)).stamp(&cfg)
}

pub fn reduce(d: &Dialogue, ratio: f64, seed: u64) -> PerturbedDialogue {
    let cfg = PerturbationConfig::new(PerturbationKind::Reduce, seed).with_ratios(ratio, DEFAULT_DUPLICATE_RATIO);
    reduce_stage(PerturbedDialogue::identity(d), ratio, &mut rng_for(seed)).stamp(&cfg)
}

pub fn duplicate(d: &Dialogue, ratio: f64, seed: u64) -> PerturbedDialogue {
    let cfg = PerturbationConfig::new(PerturbationKind::Duplicate, seed).with_ratios(DEFAULT_REDUCE_RATIO, ratio);
    duplicate_stage(PerturbedDialogue::identity(d), ratio, &mut rng_for(seed)).stamp(&cfg)
}

/// Applies a configured perturbation to a seed dialogue.
pub fn apply(cfg: &PerturbationConfig, d: &Dialogue) -> Result<PerturbedDialogue, ConfigError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed);
    let base = PerturbedDialogue::identity(d);
    let out = match cfg.kind {
        PerturbationKind::Original => base,
        PerturbationKind::Shuffle => shuffle_stage(base, &mut rng),
        PerturbationKind::Reduce => reduce_stage(base, cfg.reduce_ratio, &mut rng),
        PerturbationKind::Duplicate => duplicate_stage(base, cfg.duplicate_ratio, &mut rng),
        PerturbationKind::ShuffleReduce => {
            let shuffled = shuffle_stage(base, &mut rng);
            reduce_stage(shuffled, cfg.reduce_ratio, &mut rng)
        }
        PerturbationKind::ShuffleDuplicate => {
            let shuffled = shuffle_stage(base, &mut rng);
            duplicate_stage(shuffled, cfg.duplicate_ratio, &mut rng)
        }
    };
    Ok(out.stamp(cfg))
}

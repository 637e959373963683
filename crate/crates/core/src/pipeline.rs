//! Test-dataset generation: extraction, perturbation and annotation of a
//! whole dataset.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answerability::annotate;
use crate::artifact::{read_json, write_json};
use crate::coref::CoreferenceClient;
use crate::dialogue::{Dataset, Dialogue};
use crate::error::{ConfigError, ExtractionError};
use crate::extract::{DialogueAnalysis, Extractor};
use crate::perturb::{self, PerturbationConfig, PerturbationKind, PerturbedDialogue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub kinds: Vec<PerturbationKind>,
    pub reduce_ratio: f64,
    pub duplicate_ratio: f64,
    pub seed: u64,
    pub parallelism: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            kinds: PerturbationKind::PERTURBED.to_vec(),
            reduce_ratio: perturb::DEFAULT_REDUCE_RATIO,
            duplicate_ratio: perturb::DEFAULT_DUPLICATE_RATIO,
            seed: 0,
            parallelism: 4,
        }
    }
}

impl GenerateConfig {
    fn perturbation(&self, kind: PerturbationKind) -> PerturbationConfig {
        PerturbationConfig::new(kind, self.seed).with_ratios(self.reduce_ratio, self.duplicate_ratio)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.kinds.iter().try_for_each(|k| self.perturbation(*k).validate())
    }
}

/// A seed dialogue left out of the generated datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excluded {
    pub dialogue_id: String,
    pub reason: String,
    /// Left out because something failed, not by filtering.
    #[serde(default)]
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedAnalysis {
    template_version: String,
    model: String,
    analysis: DialogueAnalysis,
}

/// File name for a dialogue's cached analysis.
pub fn analysis_file(dir: &Path, dialogue_id: &str) -> PathBuf {
    let safe: String = dialogue_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect();
    let digest = hex::encode(&Sha256::digest(dialogue_id.as_bytes())[..4]);
    dir.join(format!("{safe}-{digest}.json"))
}

fn pool(parallelism: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool")
}

/// Analyses of every dialogue, reusing cached analyses from `cache_dir`
/// when they were produced by the same templates and model.
pub fn analyze_dialogues(
    extractor: &Extractor,
    dialogues: &[&Dialogue],
    cache_dir: Option<&Path>,
    parallelism: usize,
) -> (HashMap<String, DialogueAnalysis>, Vec<Excluded>) {
    let template_version = extractor.templates().version();
    let model = extractor.backend().model_name();
    let results: Vec<(String, Result<DialogueAnalysis, ExtractionError>)> = pool(parallelism).install(|| {
        dialogues
            .par_iter()
            .map(|d| {
                let file = cache_dir.map(|dir| analysis_file(dir, &d.dialogue_id));
                if let Some(f) = file.as_deref().filter(|f| f.exists()) {
                    match read_json::<CachedAnalysis>(f) {
                        Ok(c) if c.template_version == template_version && c.model == model => {
                            return (d.dialogue_id.clone(), Ok(c.analysis));
                        }
                        Ok(_) => {}
                        Err(e) => log::warn!("ignoring cached analysis: {e}"),
                    }
                }
                let result = extractor.analyze(d);
                if let (Some(f), Ok(a)) = (&file, &result) {
                    let cached = CachedAnalysis {
                        template_version: template_version.clone(),
                        model: model.clone(),
                        analysis: a.clone(),
                    };
                    if let Err(e) = write_json(f, &cached) {
                        log::warn!("could not cache analysis: {e}");
                    }
                }
                (d.dialogue_id.clone(), result)
            })
            .collect()
    });
    let mut analyses = HashMap::new();
    let mut excluded = Vec::new();
    for (id, r) in results {
        match r {
            Ok(a) if a.is_aligned() => {
                analyses.insert(id, a);
            }
            Ok(a) => {
                let rounds: Vec<String> = a.misaligned.iter().map(|m| m.index.to_string()).collect();
                excluded.push(Excluded {
                    dialogue_id: id,
                    reason: format!("misaligned extraction at rounds {}", rounds.join(",")),
                    failed: false,
                });
            }
            Err(e) => excluded.push(Excluded {
                dialogue_id: id,
                failed: !matches!(e, ExtractionError::Misaligned { .. }),
                reason: e.to_string(),
            }),
        }
    }
    (analyses, excluded)
}

#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub datasets: BTreeMap<PerturbationKind, Vec<PerturbedDialogue>>,
    pub analyses: HashMap<String, DialogueAnalysis>,
    pub excluded: Vec<Excluded>,
}

impl Generated {
    pub fn total_rounds(&self) -> usize {
        self.datasets.values().flatten().map(PerturbedDialogue::len).sum()
    }

    pub fn all(&self) -> impl Iterator<Item = &PerturbedDialogue> {
        self.datasets.values().flatten()
    }
}

/// Perturbs and annotates dialogues whose analyses are available.
pub fn perturb_and_annotate(
    dataset: &Dataset,
    analyses: &HashMap<String, DialogueAnalysis>,
    cfg: &GenerateConfig,
    coref: Option<&dyn CoreferenceClient>,
) -> (BTreeMap<PerturbationKind, Vec<PerturbedDialogue>>, Vec<Excluded>) {
    let kept: Vec<&Dialogue> = dataset
        .dialogues
        .iter()
        .filter(|d| analyses.contains_key(&d.dialogue_id))
        .collect();
    let mut datasets = BTreeMap::new();
    let mut excluded = Vec::new();
    let pool = pool(cfg.parallelism);
    for &kind in &cfg.kinds {
        let pc = cfg.perturbation(kind);
        let results: Vec<Result<PerturbedDialogue, Excluded>> = pool.install(|| {
            kept.par_iter()
                .map(|d| {
                    let fail = |reason: String| Excluded {
                        dialogue_id: d.dialogue_id.clone(),
                        reason: format!("{kind}: {reason}"),
                        failed: true,
                    };
                    let own = PerturbationConfig {
                        seed: perturb::dialogue_seed(cfg.seed, &d.dialogue_id, kind),
                        ..pc
                    };
                    let pd = perturb::apply(&own, d).map_err(|e| fail(e.to_string()))?;
                    annotate(pd, d, &analyses[&d.dialogue_id], coref).map_err(|e| fail(e.to_string()))
                })
                .collect()
        });
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(pd) => out.push(pd),
                Err(e) => excluded.push(e),
            }
        }
        datasets.insert(kind, out);
    }
    (datasets, excluded)
}

/// Full generation over a dataset. Invalid dialogues and dialogues whose
/// extraction failed or is misaligned are excluded and reported.
pub fn generate(
    dataset: &Dataset,
    extractor: &Extractor,
    coref: Option<&dyn CoreferenceClient>,
    cfg: &GenerateConfig,
    cache_dir: Option<&Path>,
) -> Result<Generated, ConfigError> {
    cfg.validate()?;
    let (valid, invalid) = dataset.partition_valid();
    let mut excluded: Vec<Excluded> = invalid
        .into_iter()
        .map(|r| Excluded {
            dialogue_id: r.dialogue_id.clone(),
            reason: format!("invalid dialogue: {:?}", r.issues),
            failed: false,
        })
        .collect();
    let (analyses, failed) = analyze_dialogues(extractor, &valid, cache_dir, cfg.parallelism);
    excluded.extend(failed);
    let (datasets, annotation_failures) = perturb_and_annotate(dataset, &analyses, cfg, coref);
    excluded.extend(annotation_failures);
    Ok(Generated {
        datasets,
        analyses,
        excluded,
    })
}

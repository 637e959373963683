use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use mortar_core::artifact::{read_json, read_jsonl, write_json, write_jsonl, JsonlWriter, Manifest};
use mortar_core::chat::{ChatBackend, ChatClientConfig, HttpChatClient, MockChatClient, LLM_API_KEY_ENV, SUT_API_KEY_ENV};
use mortar_core::coref::{CoreferenceClient, HttpCoref};
use mortar_core::sidecar::{self, SidecarHealth};
use mortar_core::dialogue::{parse_dataset, DatasetFormat};
use mortar_core::extract::{Extractor, ResponseCache, TemplateSet};
use mortar_core::oracle::{self, BugRecord, BugSummary, DetectConfig, Mr, Severity};
use mortar_core::perturb::{PerturbationKind, PerturbedDialogue, GENERATOR};
use mortar_core::pipeline::{self, GenerateConfig};
use mortar_core::report::{self, MrCell, REPORT_SCHEMA_VERSION};
use mortar_core::scoring::{HttpEmbedder, Scorer};
use mortar_core::sut::{DefectProfile, Harness, HistoryPolicy, HttpSut, MockSut, RoundOutcome, SeedKey, SystemUnderTest};

use crate::config::{pick, require, FileConfig};
use crate::{Cli, Command, Common, DetectArgs, EmbedderArgs, GenerateArgs, ReportArgs, RunArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_FAILED: u8 = 3;

/// Marks an error as a usage or configuration problem.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<E: std::fmt::Display>(e: E) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

pub fn dispatch(cli: Cli) -> u8 {
    let file = match cli.config.as_deref().map(FileConfig::load).transpose() {
        Ok(f) => f.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a, &file),
        Command::Run(a) => run(a, &file),
        Command::Detect(a) => detect(a, &file),
        Command::Report(a) => report_cmd(a, &file),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_FAILED
            }
        }
    }
}

struct Shared {
    out_dir: PathBuf,
    parallelism: usize,
    timeout: Duration,
    max_retries: u32,
}

impl Shared {
    fn new(c: &Common, file: &FileConfig) -> Result<Self> {
        let out_dir = require(c.out_dir.clone().or_else(|| file.out_dir.clone()), "out-dir").map_err(usage)?;
        let parallelism = pick(c.parallelism, file.parallelism, 4);
        if parallelism == 0 {
            return Err(usage("--parallelism must be at least 1"));
        }
        Ok(Shared {
            out_dir,
            parallelism,
            timeout: Duration::from_secs(pick(c.timeout_secs, file.timeout_secs, 60)),
            max_retries: pick(c.max_retries, file.max_retries, 2),
        })
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&raw)))
}

fn embedder_endpoint(e: &EmbedderArgs, file: &FileConfig) -> Option<String> {
    if e.fallback_embedder || file.fallback_embedder == Some(true) {
        None
    } else {
        e.embedder_endpoint.clone().or_else(|| file.embedder_endpoint.clone())
    }
}

fn scorer(e: &EmbedderArgs, file: &FileConfig, timeout: Duration) -> Result<Scorer> {
    match embedder_endpoint(e, file) {
        Some(ep) => Ok(Scorer::new(Arc::new(HttpEmbedder::new(ep, timeout).map_err(usage)?))),
        None => Ok(Scorer::fallback()),
    }
}

/// Models reported by the NLP service, recorded in manifests when reachable.
fn service_models(endpoint: Option<&str>, timeout: Duration) -> Option<SidecarHealth> {
    let ep = endpoint?;
    match sidecar::health(ep, timeout) {
        Ok(h) => Some(h),
        Err(e) => {
            log::warn!("{ep}/health: {e}");
            None
        }
    }
}

/// Files named `*.jsonl` under `path`, looking first in `path/sub`.
fn collect_jsonl(paths: &[PathBuf], sub: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_file() {
            out.push(p.clone());
            continue;
        }
        if !p.is_dir() {
            return Err(usage(format!("{} does not exist", p.display())));
        }
        let dir = if p.join(sub).is_dir() { p.join(sub) } else { p.clone() };
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(usage(format!("no .jsonl files in {}", dir.display())));
        }
        out.extend(found);
    }
    Ok(out)
}

/// A mock/endpoint pair given on the command line replaces the file's pair
/// as a whole, so a flag endpoint is not shadowed by a file mock.
fn either_source<M, E>(flags: (Option<M>, Option<E>), file: (Option<M>, Option<E>)) -> (Option<M>, Option<E>) {
    if flags.0.is_some() || flags.1.is_some() {
        flags
    } else {
        file
    }
}

fn detect_format(raw: &[u8]) -> DatasetFormat {
    let is_coqa = serde_json::from_slice::<Value>(raw)
        .ok()
        .is_some_and(|v| v.get("data").is_some());
    if is_coqa {
        DatasetFormat::Coqa
    } else {
        DatasetFormat::Generic
    }
}

fn parse_kinds(spec: &str) -> Result<Vec<PerturbationKind>> {
    let mut kinds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let k: PerturbationKind = part.parse().map_err(usage)?;
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        return Err(usage("--perturbations lists no kinds"));
    }
    Ok(kinds)
}

fn generate(a: GenerateArgs, file: &FileConfig) -> Result<u8> {
    let shared = Shared::new(&a.common, file)?;
    let dataset_path = require(a.dataset.or_else(|| file.dataset.clone()), "dataset").map_err(usage)?;
    let raw = fs::read(&dataset_path).with_context(|| format!("reading {}", dataset_path.display()))?;
    let format = match a.format.or_else(|| file.format.clone()) {
        Some(f) => f.parse::<DatasetFormat>().map_err(usage)?,
        None => detect_format(&raw),
    };
    let dataset = parse_dataset(&raw, format).map_err(usage)?;
    let kinds = parse_kinds(
        &a.perturbations
            .or_else(|| file.perturbations.as_ref().map(|p| p.joined()))
            .unwrap_or_else(|| "ds,dr,dd,dsr,dsd".into()),
    )?;
    let cfg = GenerateConfig {
        kinds,
        reduce_ratio: pick(a.reduce_ratio, file.reduce_ratio, mortar_core::perturb::DEFAULT_REDUCE_RATIO),
        duplicate_ratio: pick(a.duplicate_ratio, file.duplicate_ratio, mortar_core::perturb::DEFAULT_DUPLICATE_RATIO),
        seed: pick(a.seed, file.seed, 0),
        parallelism: shared.parallelism,
    };
    cfg.validate().map_err(usage)?;

    let (mock, endpoint) = either_source(
        (a.mock_extractor, a.extractor_endpoint),
        (file.mock_extractor.clone(), file.extractor_endpoint.clone()),
    );
    let backend: Arc<dyn ChatBackend> = match (mock, endpoint) {
        (Some(path), _) => Arc::new(MockChatClient::from_path(&path).map_err(usage)?),
        (None, Some(ep)) => {
            let mut c = ChatClientConfig::new(ep, pick(a.extractor_model, file.extractor_model.clone(), "default".into()))
                .api_key_from_env(LLM_API_KEY_ENV);
            c.timeout = shared.timeout;
            c.max_retries = shared.max_retries;
            c.max_in_flight = shared.parallelism;
            Arc::new(HttpChatClient::new(c).map_err(usage)?)
        }
        (None, None) => return Err(usage("one of --extractor-endpoint or --mock-extractor is required")),
    };
    let templates = match a.templates.or_else(|| file.templates.clone()) {
        Some(dir) => TemplateSet::load_dir(&dir).map_err(usage)?,
        None => TemplateSet::default(),
    };
    let cache_dir = shared.out_dir.join("cache");
    let cache = ResponseCache::persistent(&cache_dir).with_context(|| format!("creating {}", cache_dir.display()))?;
    let extractor = Extractor::new(backend).with_templates(templates).with_cache(cache);
    let coref_endpoint = a.coref_endpoint.or_else(|| file.coref_endpoint.clone());
    let coref_service = service_models(coref_endpoint.as_deref(), shared.timeout);
    let coref: Option<Box<dyn CoreferenceClient>> = match coref_endpoint {
        Some(ep) => Some(Box::new(HttpCoref::new(ep, shared.timeout).map_err(usage)?)),
        None => None,
    };

    let generated = pipeline::generate(
        &dataset,
        &extractor,
        coref.as_deref(),
        &cfg,
        Some(&shared.out_dir.join("extraction")),
    )
    .map_err(usage)?;

    let manifest = Manifest::new("generate")
        .with("dataset", dataset_path.display().to_string())
        .with("dataset_sha256", sha256_file(&dataset_path)?)
        .with("format", format.to_string())
        .with("perturbations", cfg.kinds.iter().map(|k| k.code()).collect::<Vec<_>>())
        .with("reduce_ratio", cfg.reduce_ratio)
        .with("duplicate_ratio", cfg.duplicate_ratio)
        .with("seed", cfg.seed)
        .with("generator", GENERATOR)
        .with("extractor", extractor.backend().describe())
        .with("extractor_model", extractor.backend().model_name())
        .with("template_version", extractor.templates().version())
        .with("coref", coref.as_ref().map_or_else(|| "heuristic".to_string(), |c| c.name()))
        .with("coref_service", &coref_service)
        .with("cache_dir", cache_dir.display().to_string())
        .with("parallelism", cfg.parallelism);
    let perturbed_dir = shared.out_dir.join("perturbed");
    for (kind, dialogues) in &generated.datasets {
        write_jsonl(&perturbed_dir.join(format!("{kind}.jsonl")), Some(&manifest), dialogues)?;
    }
    write_json(&shared.out_dir.join("excluded.json"), &generated.excluded)?;
    let all: Vec<PerturbedDialogue> = generated.all().cloned().collect();
    let summary = report::dataset_summary(&all);
    let final_manifest = manifest
        .with("llm_requests", extractor.requests())
        .with("kept_dialogues", generated.analyses.len())
        .with("excluded_dialogues", generated.excluded.len())
        .with("dataset_summary", &summary);
    write_json(&shared.out_dir.join("manifest.json"), &final_manifest)?;
    print!("{}", report::dataset_summary_text(&summary));
    println!(
        "kept {} of {} dialogues, {} LLM requests",
        generated.analyses.len(),
        dataset.dialogues.len(),
        extractor.requests()
    );

    if generated.analyses.is_empty() {
        return Ok(EXIT_FAILED);
    }
    Ok(if generated.excluded.iter().any(|e| e.failed) {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}

fn run(a: RunArgs, file: &FileConfig) -> Result<u8> {
    let shared = Shared::new(&a.common, file)?;
    let inputs = collect_jsonl(&a.inputs, "perturbed")?;
    let policy: HistoryPolicy = match a.history_policy.or_else(|| file.history_policy.clone()) {
        Some(p) => p.parse().map_err(usage)?,
        None => HistoryPolicy::default(),
    };
    let (mock, endpoint) = either_source((a.sut, a.sut_endpoint), (file.sut.clone(), file.sut_endpoint.clone()));
    let model = pick(a.sut_model, file.sut_model.clone(), "default".into());
    let sut: Box<dyn SystemUnderTest> = match (mock, endpoint) {
        (Some(m), _) => {
            if !m.starts_with("mock:") {
                return Err(usage(format!("--sut expects mock:<profile>, got {m}")));
            }
            Box::new(MockSut {
                profile: m.parse::<DefectProfile>().map_err(usage)?,
            })
        }
        (None, Some(ep)) => {
            let mut c = ChatClientConfig::new(ep, model.clone()).api_key_from_env(SUT_API_KEY_ENV);
            c.timeout = shared.timeout;
            c.max_retries = shared.max_retries;
            c.max_in_flight = shared.parallelism;
            Box::new(HttpSut::new(HttpChatClient::new(c).map_err(usage)?))
        }
        (None, None) => return Err(usage("one of --sut-endpoint or --sut mock:<profile> is required")),
    };
    let scorer = scorer(&a.embedder, file, shared.timeout)?;
    let embed_service = service_models(embedder_endpoint(&a.embedder, file).as_deref(), shared.timeout);
    let mut harness = Harness::new(sut.as_ref());
    harness.history_policy = policy;
    harness.scorer = Some(&scorer);

    let transcripts = shared.out_dir.join("transcripts");
    let (mut dialogues_total, mut partial) = (0usize, 0usize);
    let mut written = Vec::new();
    for input in &inputs {
        let (upstream, dialogues): (Option<Manifest>, Vec<PerturbedDialogue>) = read_jsonl(input)?;
        if dialogues.iter().any(|d| d.rounds.iter().any(|r| r.annotation.is_none())) {
            log::warn!("{}: some rounds are not annotated; MR1 will skip them", input.display());
        }
        let manifest = Manifest::new("run")
            .with("input", input.display().to_string())
            .with("input_sha256", sha256_file(input)?)
            .with("sut", sut.describe())
            .with("sut_model", &model)
            .with("history_policy", policy)
            .with("system_instructions", &harness.system_instructions)
            .with("embedder", scorer.embedder_name())
            .with("embedder_service", &embed_service)
            .with("parallelism", shared.parallelism)
            .with("seed", upstream.as_ref().and_then(|m| m.get("seed")).cloned())
            .with("template_version", upstream.as_ref().and_then(|m| m.get("template_version")).cloned())
            .with("upstream", upstream);
        let path = transcripts.join(format!("{}.jsonl", file_stem(input)));
        let writer = JsonlWriter::create(&path, Some(&manifest))?;
        let errors = std::sync::Mutex::new(Vec::new());
        let runs = harness.run_each(&dialogues, shared.parallelism, |_, run| {
            if let Err(e) = writer.append(&run.outcomes) {
                errors.lock().unwrap_or_else(|e| e.into_inner()).push(e);
            }
        });
        writer.finish()?;
        if let Some(e) = errors.into_inner().unwrap_or_default().into_iter().next() {
            return Err(e.into());
        }
        dialogues_total += runs.len();
        partial += runs.iter().filter(|r| r.partial).count();
        written.push(path.display().to_string());
    }
    let manifest = Manifest::new("run")
        .with("inputs", inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())
        .with("transcripts", &written)
        .with("sut", sut.describe())
        .with("history_policy", policy)
        .with("embedder", scorer.embedder_name())
        .with("embedder_low_confidence", scorer.low_confidence())
        .with("dialogues", dialogues_total)
        .with("partial_dialogues", partial);
    write_json(&shared.out_dir.join("run_manifest.json"), &manifest)?;
    println!("{dialogues_total} dialogues sent to {}, {partial} partial", sut.describe());
    Ok(match partial {
        0 => EXIT_OK,
        p if p == dialogues_total => EXIT_FAILED,
        _ => EXIT_PARTIAL,
    })
}

/// Written by `detect`, read by `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DetectSummary {
    pub manifest: Manifest,
    pub sut: String,
    pub overall: BugSummary,
    pub per_kind: BTreeMap<PerturbationKind, BugSummary>,
}

fn detect(a: DetectArgs, file: &FileConfig) -> Result<u8> {
    let shared = Shared::new(&a.common, file)?;
    let inputs = collect_jsonl(&a.inputs, "transcripts")?;
    let cfg = DetectConfig {
        eps_a: pick(a.eps_a, file.eps_a, oracle::DEFAULT_EPS_A),
        eps_b: pick(a.eps_b, file.eps_b, oracle::DEFAULT_EPS_B),
        cross_kind: !(a.per_kind || file.per_kind == Some(true)),
    };
    let scorer = scorer(&a.embedder, file, shared.timeout)?;
    let mut outcomes: Vec<RoundOutcome> = Vec::new();
    let mut suts = BTreeSet::new();
    for input in &inputs {
        let (m, mut o): (Option<Manifest>, Vec<RoundOutcome>) = read_jsonl(input)?;
        if let Some(s) = m.as_ref().and_then(|m| m.get("sut")).and_then(Value::as_str) {
            suts.insert(s.to_string());
        }
        outcomes.append(&mut o);
    }
    let sut = if suts.is_empty() {
        "unknown".to_string()
    } else {
        suts.into_iter().collect::<Vec<_>>().join("+")
    };
    let det = oracle::detect(&outcomes, &cfg, &scorer);
    let overall = oracle::summarize(&det);
    let kinds: BTreeSet<PerturbationKind> = outcomes.iter().map(|o| o.kind).collect();
    let per_kind: BTreeMap<PerturbationKind, BugSummary> =
        kinds.into_iter().map(|k| (k, oracle::summarize_kind(&det, k))).collect();

    let bugs: Vec<&BugRecord> = det.bugs().collect();
    write_jsonl(&shared.out_dir.join("bugs.jsonl"), None, &bugs)?;
    let manifest = Manifest::new("detect")
        .with("inputs", inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())
        .with("eps_a", cfg.eps_a)
        .with("eps_b", cfg.eps_b)
        .with("cross_kind", cfg.cross_kind)
        .with("embedder", scorer.embedder_name())
        .with("embedder_low_confidence", scorer.low_confidence())
        .with("report_schema_version", REPORT_SCHEMA_VERSION);
    let cells: Vec<MrCell> = per_kind
        .iter()
        .map(|(k, s)| MrCell {
            sut: sut.clone(),
            kind: *k,
            summary: s.clone(),
        })
        .collect();
    let rows = report::mr_table(&cells);
    fs::write(shared.out_dir.join("mr_table.csv"), report::mr_table_csv(&rows))?;
    fs::write(shared.out_dir.join("mr_table.txt"), report::mr_table_text(&rows))?;
    write_json(
        &shared.out_dir.join("summary.json"),
        &DetectSummary {
            manifest,
            sut,
            overall: overall.clone(),
            per_kind,
        },
    )?;
    print!("{}", report::mr_table_text(&rows));
    for s in &overall.per_mr {
        println!(
            "{}: {} unique bugs ({} critical) over {} units",
            s.mr, s.unique_bugs, s.critical, s.comparable_units
        );
    }
    if overall.skipped_rounds > 0 || overall.failed_rounds > 0 {
        println!(
            "skipped {} unannotated rounds, {} failed rounds",
            overall.skipped_rounds, overall.failed_rounds
        );
    }
    Ok(EXIT_OK)
}

fn bug_seeds(path: &Path, all: bool) -> Result<BTreeSet<SeedKey>> {
    let file = if path.is_dir() { path.join("bugs.jsonl") } else { path.to_path_buf() };
    let (_, bugs): (_, Vec<BugRecord>) = read_jsonl(&file)?;
    let unique = oracle::dedup(&bugs);
    Ok(unique
        .into_iter()
        .filter(|b| all || b.severity == Severity::Critical)
        .map(|b| b.seed_key)
        .collect())
}

fn report_cmd(a: ReportArgs, file: &FileConfig) -> Result<u8> {
    let out_dir = a.common.out_dir.clone().or_else(|| file.out_dir.clone());
    if a.datasets.is_empty() && a.detections.is_empty() && a.overlap.is_empty() {
        return Err(usage("nothing to report: give --datasets, --detections or --overlap"));
    }
    let mut json = serde_json::Map::new();
    json.insert("report_schema_version".into(), REPORT_SCHEMA_VERSION.into());
    let emit = |name: &str, text: String, csv: Option<String>| -> Result<()> {
        print!("{text}");
        if let Some(dir) = &out_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("{name}.txt")), &text)?;
            if let Some(c) = csv {
                fs::write(dir.join(format!("{name}.csv")), c)?;
            }
        }
        Ok(())
    };

    if !a.datasets.is_empty() {
        let mut all = Vec::new();
        for f in collect_jsonl(&a.datasets, "perturbed")? {
            let (_, mut d): (Option<Manifest>, Vec<PerturbedDialogue>) = read_jsonl(&f)?;
            all.append(&mut d);
        }
        let cols = report::dataset_summary(&all);
        emit(
            "dataset_summary",
            report::dataset_summary_text(&cols),
            Some(report::dataset_summary_csv(&cols)),
        )?;
        json.insert("dataset_summary".into(), serde_json::to_value(&cols)?);
    }

    if !a.detections.is_empty() {
        let mut cells = Vec::new();
        for d in &a.detections {
            let path = if d.is_dir() { d.join("summary.json") } else { d.clone() };
            let s: DetectSummary = read_json(&path)?;
            for (kind, summary) in s.per_kind {
                cells.push(MrCell {
                    sut: s.sut.clone(),
                    kind,
                    summary,
                });
            }
        }
        let rows = report::mr_table(&cells);
        emit("mr_table", report::mr_table_text(&rows), Some(report::mr_table_csv(&rows)))?;
        let counts: BTreeMap<String, BTreeMap<Mr, usize>> = cells.iter().fold(BTreeMap::new(), |mut acc, c| {
            let e = acc.entry(c.sut.clone()).or_default();
            for s in &c.summary.per_mr {
                *e.entry(s.mr).or_default() += s.unique_bugs;
            }
            acc
        });
        json.insert("mr_table".into(), serde_json::to_value(&rows)?);
        json.insert("bugs_per_mr".into(), serde_json::to_value(&counts)?);
    }

    if !a.overlap.is_empty() {
        let mut sets = Vec::new();
        for spec in &a.overlap {
            let (name, path) = spec
                .split_once('=')
                .ok_or_else(|| usage(format!("--overlap expects NAME=PATH, got {spec}")))?;
            sets.push((name.to_string(), bug_seeds(Path::new(path), a.all_bugs)?));
        }
        if sets.len() < 2 {
            bail!(UsageError("--overlap needs at least two sets".into()));
        }
        let o = report::overlap(&sets);
        emit("overlap", report::overlap_text(&o), None)?;
        json.insert("overlap".into(), serde_json::to_value(&o)?);
    }

    if let Some(dir) = &out_dir {
        write_json(&dir.join("report.json"), &Value::Object(json))?;
    }
    Ok(EXIT_OK)
}

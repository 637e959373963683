//! Settings from a TOML or JSON file, merged under command-line flags and
//! environment variables.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

/// Every key is optional; unknown keys are rejected so typos surface.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub format: Option<String>,
    pub perturbations: Option<Perturbations>,
    pub reduce_ratio: Option<f64>,
    pub duplicate_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub extractor_endpoint: Option<String>,
    pub extractor_model: Option<String>,
    pub mock_extractor: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub coref_endpoint: Option<String>,
    pub embedder_endpoint: Option<String>,
    pub fallback_embedder: Option<bool>,
    pub sut_endpoint: Option<String>,
    pub sut_model: Option<String>,
    pub sut: Option<String>,
    pub eps_a: Option<f64>,
    pub eps_b: Option<f64>,
    pub history_policy: Option<String>,
    pub parallelism: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
    pub per_kind: Option<bool>,
}

/// Either `"ds,dr"` or `["ds", "dr"]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Perturbations {
    Joined(String),
    List(Vec<String>),
}

impl Perturbations {
    pub fn joined(&self) -> String {
        match self {
            Perturbations::Joined(s) => s.clone(),
            Perturbations::List(v) => v.join(","),
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if is_json {
            serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }
}

/// First of flag/env value, file value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn require<T>(value: Option<T>, name: &str) -> Result<T> {
    match value {
        Some(v) => Ok(v),
        None => bail!("missing required setting --{name}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_load() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 5\nperturbations = [\"ds\", \"dr\"]\neps_a = 0.5\n").unwrap();
        let c = FileConfig::load(&t).unwrap();
        assert_eq!(c.seed, Some(5));
        assert_eq!(c.perturbations.unwrap().joined(), "ds,dr");
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"perturbations":"dsd","parallelism":2}"#).unwrap();
        let c = FileConfig::load(&j).unwrap();
        assert_eq!(c.parallelism, Some(2));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "sed = 5\n").unwrap();
        assert!(FileConfig::load(&t).is_err());
    }

    #[test]
    fn flags_win() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }
}

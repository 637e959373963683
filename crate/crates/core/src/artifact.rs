//! Run artifacts: manifests and JSON-lines files.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const TOOL_NAME: &str = "mortar";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to reproduce one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    #[serde(default)]
    pub settings: Map<String, Value>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            settings: Map::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.settings.insert(key.into(), v);
        self
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.set(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.settings.get(key)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ArtifactError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    let raw = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&raw).map_err(|e| ArtifactError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Header line of a JSON-lines artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    manifest: Manifest,
}

/// Writes `items` one per line, after an optional manifest header line.
pub fn write_jsonl<T: Serialize>(path: &Path, manifest: Option<&Manifest>, items: &[T]) -> Result<(), ArtifactError> {
    let w = JsonlWriter::create(path, manifest)?;
    w.append(items)?;
    w.finish()
}

/// Reads a JSON-lines artifact, returning its header manifest if present.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<Manifest>, Vec<T>), ArtifactError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut manifest = None;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| ArtifactError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        };
        if i == 0 && line.trim_start().starts_with("{\"manifest\"") {
            manifest = Some(serde_json::from_str::<Header>(&line).map_err(parse_err)?.manifest);
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(parse_err)?);
    }
    Ok((manifest, items))
}

/// Append-only JSON-lines writer; each `append` call is committed as one
/// block under a lock so concurrent writers never interleave their lines.
pub struct JsonlWriter {
    path: String,
    out: Mutex<BufWriter<File>>,
}

impl JsonlWriter {
    pub fn create(path: &Path, manifest: Option<&Manifest>) -> Result<Self, ArtifactError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(path))?;
        }
        let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
        if let Some(m) = manifest {
            let line = serde_json::to_string(&Header { manifest: m.clone() }).unwrap_or_default();
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        Ok(JsonlWriter {
            path: path.display().to_string(),
            out: Mutex::new(out),
        })
    }

    pub fn append<T: Serialize>(&self, items: &[T]) -> Result<(), ArtifactError> {
        let mut block = String::new();
        for item in items {
            block.push_str(&serde_json::to_string(item).map_err(|e| ArtifactError::Parse {
                path: self.path.clone(),
                line: 0,
                message: e.to_string(),
            })?);
            block.push('\n');
        }
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        out.write_all(block.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|source| ArtifactError::Io {
                path: self.path.clone(),
                source,
            })
    }

    pub fn finish(self) -> Result<(), ArtifactError> {
        let path = self.path;
        self.out
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .flush()
            .map_err(|source| ArtifactError::Io { path, source })
    }
}

//! Config files, run manifests and output-directory plumbing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use metasampler::data::SynthSpec;
use metasampler::trainer::{SamplerKind, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST: &str = "manifest.json";

fn default_few_shot_n() -> usize {
    5
}

/// Everything `gen-data` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default)]
    pub spec: SynthSpec,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of identities down-sampled to `few_shot_n`.
    #[serde(default)]
    pub imbalance: Option<f64>,
    #[serde(default = "default_few_shot_n")]
    pub few_shot_n: usize,
    /// Fraction of train labels switched.
    #[serde(default)]
    pub noise: Option<f64>,
    /// Seed of the label switching; `seed` when absent.
    #[serde(default)]
    pub noise_seed: Option<u64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            spec: SynthSpec::default(),
            seed: 0,
            imbalance: None,
            few_shot_n: default_few_shot_n(),
            noise: None,
            noise_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub dataset: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareFile {
    pub dataset: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub samplers: Vec<SamplerKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub dataset: PathBuf,
    pub model: PathBuf,
    #[serde(default)]
    pub metric: metasampler::losses::Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpFile {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub sampler: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance of one command invocation. Its `config` is a complete config
/// for the same command, so a manifest can be passed back as `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub dataset: Option<DatasetRef>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub output_dir: PathBuf,
    pub artifacts: Vec<String>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A loaded config plus what its manifest (if it was one) expects.
pub struct Loaded<C> {
    pub config: C,
    pub expected_sha256: Option<String>,
}

/// Reads `path` as either a plain config for `command` or a manifest written
/// by a previous `command` run. Relative paths inside resolve against the
/// file's directory (see [`resolve`]).
pub fn load_config<C: DeserializeOwned>(path: &Path, command: &str) -> Result<Loaded<C>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Usage)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(Failure::Usage)?;
    let is_manifest = value.get("command").is_some() && value.get("config").is_some() && value.get("artifacts").is_some();
    let (config, expected_sha256) = if is_manifest {
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| Failure::Usage(anyhow!("malformed manifest: {e}")))?;
        if manifest.command != command {
            return Err(Failure::Usage(anyhow!(
                "manifest was written by `{}`, not `{command}`",
                manifest.command
            )));
        }
        (manifest.config, manifest.dataset.map(|d| d.sha256))
    } else {
        (value, None)
    };
    let config = serde_json::from_value(config)
        .with_context(|| format!("invalid {command} config {}", path.display()))
        .map_err(Failure::Usage)?;
    Ok(Loaded { config, expected_sha256 })
}

/// Resolves a path from a config file against the file's directory.
pub fn resolve(base: Option<&Path>, path: &Path) -> PathBuf {
    match base.and_then(Path::parent) {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

/// Absolute form of an existing input path; usage error when missing.
pub fn existing(path: &Path, what: &str) -> Result<PathBuf, Failure> {
    fs::canonicalize(path).map_err(|e| Failure::Usage(anyhow!("{what} {}: {e}", path.display())))
}

/// Loads a dataset and its content hash, checking it against `expected`.
pub fn load_dataset(path: &Path, expected: Option<&str>) -> Result<(metasampler::data::Dataset, DatasetRef), Failure> {
    let path = existing(path, "dataset")?;
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display())).map_err(Failure::Usage)?;
    let sha256 = sha256_hex(&bytes);
    if let Some(exp) = expected {
        if exp != sha256 {
            return Err(Failure::Usage(anyhow!(
                "dataset {} has hash {sha256}, manifest expects {exp}",
                path.display()
            )));
        }
    }
    let text = String::from_utf8(bytes).map_err(|e| Failure::Usage(anyhow!("dataset {} is not UTF-8: {e}", path.display())))?;
    let dataset = metasampler::data::parse(&text)
        .with_context(|| format!("parsing dataset {}", path.display()))
        .map_err(Failure::Usage)?;
    Ok((dataset, DatasetRef { path, sha256 }))
}

/// Writes artifacts under one directory, remembering their names. Names are
/// plain file names; anything with a separator or `..` is refused.
pub struct OutDir {
    root: PathBuf,
    artifacts: Vec<String>,
    started: u128,
}

impl OutDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: fs::canonicalize(root)?,
            artifacts: Vec::new(),
            started: now_ms(),
        })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            bail!("refusing artifact name `{name}`");
        }
        let path = self.root.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes the manifest listing every artifact written so far (and itself).
    pub fn finish<C: Serialize>(mut self, command: &str, config: &C, seed: Option<u64>, dataset: Option<DatasetRef>) -> anyhow::Result<()> {
        let mut artifacts = self.artifacts.clone();
        artifacts.push(MANIFEST.to_string());
        let manifest = Manifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            dataset,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            output_dir: self.root.clone(),
            artifacts,
        };
        self.write_json(MANIFEST, &manifest)?;
        Ok(())
    }
}

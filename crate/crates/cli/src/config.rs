//! Run configuration files (TOML or JSON) and their resolved, hashed form.

use std::fs;
use std::path::{Path, PathBuf};

use contextad::series::StandardizeMethod;
use contextad::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Per-channel standardization fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Standardize {
    #[default]
    MeanStd,
    MedianIqr,
    None,
}

impl Standardize {
    pub fn method(self) -> Option<StandardizeMethod> {
        match self {
            Standardize::MeanStd => Some(StandardizeMethod::MeanStd),
            Standardize::MedianIqr => Some(StandardizeMethod::MedianIqr),
            Standardize::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest (or its directory), relative to the config file.
    pub dataset: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub standardize: Standardize,
    pub train: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Parses TOML or JSON by file extension.
pub fn parse_file<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_text(&text, path)
}

pub fn parse_text<T: DeserializeOwned>(text: &str, path: &Path) -> CliResult<T> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

impl RunConfig {
    /// Loads and validates; relative paths are resolved against the config's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = parse_file(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Hex SHA-256 prefix of the canonical JSON of `value` with its `seed` field removed.
pub fn config_hash<T: Serialize>(value: &T) -> CliResult<String> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    if let Value::Object(map) = &mut v {
        map.remove("seed");
    }
    let digest = Sha256::digest(v.to_string().as_bytes());
    Ok(hex::encode(digest)[..12].to_string())
}

/// `<hash>-seed<seed>`.
pub fn run_dir_name(train: &TrainConfig) -> CliResult<String> {
    Ok(format!("{}-seed{}", config_hash(train)?, train.seed))
}

/// Sets `path` (dot separated) inside a JSON object tree, creating objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{path}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Ok(())
}

/// Applies dotted-path overrides to a training config.
pub fn with_overrides(base: &TrainConfig, overrides: &[(String, Value)]) -> CliResult<TrainConfig> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Config(e.to_string()))?;
    for (path, value) in overrides {
        set_path(&mut v, path, value.clone())?;
    }
    let cfg: TrainConfig = serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

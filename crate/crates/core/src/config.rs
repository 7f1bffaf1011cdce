//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcheck::GradcheckConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Parse(String),

    #[error("override {0:?} is not of the form key=value")]
    Override(String),

    #[error("override {key:?}: {message}")]
    Path { key: String, message: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    /// Parses TOML text and applies overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// Reads a file, or starts from the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}

/// Sets a dotted key such as `train.base_lr=0.01`. Values are read as TOML
/// and fall back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_owned()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(assignment.to_owned()));
    }
    let value = format!("v = {}", raw)
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Path {
            key: key.to_owned(),
            message: format!("{:?} is not a table", part),
        })?;
    }
    table.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

//! Config files with dotted-key overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cure::labeling::{BackendConfig, RetryPolicy};
use cure::{Error, Result};

/// Sections of a config file that only the CLI reads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliSections {
    pub labeling: LabelingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingConfig {
    /// `offline` or `live`.
    pub backend: String,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub live: BackendConfig,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            backend: "offline".into(),
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            live: BackendConfig::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for the right-hand side; bare words are strings.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Reads `path` (or starts empty), applies `key=value` overrides and returns
/// the merged table.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<toml::Table> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        set_path(&mut table, k.trim(), parse_scalar(v.trim()))?;
    }
    Ok(table)
}

pub fn set(table: &mut toml::Table, key: &str, value: impl Into<toml::Value>) -> Result<()> {
    set_path(table, key, value.into())
}

pub fn decode<T: DeserializeOwned>(table: &toml::Table) -> Result<T> {
    toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

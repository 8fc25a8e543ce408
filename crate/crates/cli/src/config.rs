//! Flat key-value run configuration: a TOML file (or a JSON sidecar from an
//! earlier run) plus `key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use swapkit_core::backend::BackendConfig;
use swapkit_core::{ConceptSpec, SwapConfig};

use crate::CliError;

/// Keys handled by the CLI itself; everything else must be a swap setting.
const CLI_KEYS: [&str; 4] = ["concept_token", "checkpoint_ref", "jobs", "backend"];

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub swap: SwapConfig,
    /// Rare token of the target concept; defaults to the first word of
    /// `target_concept`.
    pub concept_token: String,
    pub checkpoint_ref: String,
    pub jobs: usize,
    pub backend: BackendConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CliKeys {
    concept_token: String,
    checkpoint_ref: String,
    jobs: usize,
    backend: BackendConfig,
}

impl Default for CliKeys {
    fn default() -> Self {
        Self {
            concept_token: String::new(),
            checkpoint_ref: String::new(),
            jobs: 1,
            backend: BackendConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::config("ConfigError", msg)
}

impl CliConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut map = match path {
            Some(p) => read_map(p)?,
            None => Map::new(),
        };
        for o in overrides {
            apply_override(&mut map, o)?;
        }
        Self::from_map(map)
    }

    pub fn from_map(mut map: Map<String, Value>) -> Result<Self, CliError> {
        if let Some(Value::Object(b)) = map.get_mut("backend") {
            b.entry("kind").or_insert_with(|| Value::String("toy".into()));
        }
        let mut cli = Map::new();
        for key in CLI_KEYS {
            if let Some(v) = map.remove(key) {
                cli.insert(key.to_string(), v);
            }
        }
        let swap: SwapConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| config_err(e.to_string()))?;
        let keys: CliKeys =
            serde_json::from_value(Value::Object(cli)).map_err(|e| config_err(e.to_string()))?;
        Ok(Self {
            swap,
            concept_token: keys.concept_token,
            checkpoint_ref: keys.checkpoint_ref,
            jobs: keys.jobs,
            backend: keys.backend,
        })
    }

    /// Flat map of every effective setting.
    pub fn to_map(&self) -> Map<String, Value> {
        let Value::Object(mut map) = serde_json::to_value(&self.swap).expect("config serializes") else {
            unreachable!("swap config is a struct");
        };
        let keys = CliKeys {
            concept_token: self.concept_token.clone(),
            checkpoint_ref: self.checkpoint_ref.clone(),
            jobs: self.jobs,
            backend: self.backend.clone(),
        };
        if let Value::Object(extra) = serde_json::to_value(keys).expect("config serializes") {
            map.extend(extra);
        }
        map
    }

    pub fn concept(&self) -> ConceptSpec {
        let token = if self.concept_token.trim().is_empty() {
            self.swap
                .target_concept
                .split_whitespace()
                .next()
                .unwrap_or_default()
                .to_string()
        } else {
            self.concept_token.clone()
        };
        ConceptSpec::new(&token, &self.checkpoint_ref)
    }
}

/// Reads a TOML config, or a JSON file that is either a flat config or a
/// sidecar holding one under `config`.
fn read_map(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value: Value = if is_json {
        let mut v: Value = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if let Some(inner) = v.get_mut("config") {
            inner.take()
        } else {
            v
        }
    } else {
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| config_err(e.to_string()))?
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(config_err(format!("{}: expected a table of settings", path.display()))),
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Applies `key=value`; dotted keys address nested tables.
pub fn apply_override(map: &mut Map<String, Value>, arg: &str) -> Result<(), CliError> {
    let (key, value) = arg
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {arg:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key {key:?}")));
    }
    let mut cur = map;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if !entry.is_object() {
            *entry = Value::Object(Map::new());
        }
        cur = entry.as_object_mut().expect("just made an object");
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

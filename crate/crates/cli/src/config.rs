use serde::{Deserialize, Serialize};
use sod_core::data::DatasetSpec;
use sod_core::model::ModelConfig;
use sod_core::training::TrainConfig;
use sod_core::{Result, SodError};
use std::path::Path;

/// Merged configuration tree; file values first, `--set` overrides on top.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Echo the resolved configuration into a run directory.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| SodError::Config(format!("serialize config: {e}")))?;
        std::fs::write(dir.join("config_resolved.toml"), text)?;
        Ok(())
    }
}

/// Parse one `--set key.path=value` override into the TOML tree.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| SodError::Config(format!("--set expects key=value, got `{spec}`")))?;
    // value is parsed as TOML (bool/number/array); anything else is a string
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(SodError::Config(format!("bad override key `{path}`")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| SodError::Config(format!("`{path}`: `{k}` is not a table")))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| SodError::Config(format!("`{path}` does not address a table entry")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| SodError::Config(format!("{}: {e}", p.display())))?;
            text.parse()
                .map_err(|e| SodError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    RunConfig::deserialize(tree).map_err(|e| SodError::Config(e.to_string()))
}

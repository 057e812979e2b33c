//! Config file loading: TOML with dotted-path overrides.

use crate::error::{CliError, Result};
use pina::sim::ExperimentConfig;
use std::path::Path;

/// Parses `key.path=value` into path segments and a TOML value. Values are
/// parsed as TOML literals, falling back to a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override '{spec}' is not key.path=value")))?;
    if path.is_empty() {
        return Err(CliError::config(format!("override '{spec}' has an empty key")));
    }
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").expect("parsed helper key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path.split('.').map(str::to_string).collect(), value))
}

fn apply_override(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("cannot descend into '{key}'")))?;
        node = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::config("override path ends inside a non-table value".to_string()))?;
    table.insert(path[path.len() - 1].clone(), value);
    Ok(())
}

/// Loads and validates an experiment config from a TOML file plus overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::config(format!("{e}")))?;
    let mut value = toml::Value::Table(table);
    for spec in overrides {
        let (path, v) = parse_override(spec)?;
        apply_override(&mut value, &path, v)?;
    }
    let config: ExperimentConfig = value
        .try_into()
        .map_err(|e| CliError::config(format!("{e}")))?;
    config.validate().map_err(CliError::from)?;
    Ok(config)
}

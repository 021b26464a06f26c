//! Config documents: TOML files flattened to dotted keys, merged with
//! command-line overrides (flag > file > default).

use std::path::Path;

use panda_core::config::{make_run_config, ConfigValue, RunConfig};

use crate::error::{io_err, PandaError, Result};

/// Flattens a TOML document into `(dotted.key, value)` pairs in file order
/// of the parser (sorted within each table).
pub fn parse_config_text(text: &str, origin: &Path) -> Result<Vec<(String, ConfigValue)>> {
    let syntax = |reason: String| PandaError::ConfigSyntax {
        path: origin.to_path_buf(),
        reason,
    };
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| syntax(e.message().to_string()))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out).map_err(syntax)?;
    Ok(out)
}

fn flatten(
    prefix: &str,
    table: &toml::Table,
    out: &mut Vec<(String, ConfigValue)>,
) -> std::result::Result<(), String> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let value = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::Integer(i) => ConfigValue::Int(*i),
            toml::Value::Float(f) => ConfigValue::Float(*f),
            toml::Value::Boolean(b) => ConfigValue::Bool(*b),
            toml::Value::String(s) => ConfigValue::Str(s.clone()),
            toml::Value::Array(items) => {
                let nums = items
                    .iter()
                    .map(|i| match i {
                        toml::Value::Integer(n) => Ok(*n as f64),
                        toml::Value::Float(f) => Ok(*f),
                        _ => Err(format!("`{key}`: arrays must hold numbers")),
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                ConfigValue::List(nums)
            }
            toml::Value::Datetime(_) => {
                return Err(format!("`{key}`: dates are not config values"))
            }
        };
        out.push((key, value));
    }
    Ok(())
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, ConfigValue)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config_text(&text, path)
}

/// Builds a config from an optional file and overrides; overrides win.
pub fn resolve_config(
    file: Option<&Path>,
    overrides: &[(String, ConfigValue)],
) -> Result<RunConfig> {
    let mut entries = match file {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    entries.extend(overrides.iter().cloned());
    Ok(make_run_config(
        entries.iter().map(|(k, v)| (k.as_str(), v)),
    )?)
}

/// Config as a TOML document that [`parse_config_text`] reads back.
pub fn config_to_toml(cfg: &RunConfig) -> String {
    let mut root = toml::Table::new();
    for (key, v) in cfg.to_entries() {
        let (section, name) = key.split_once('.').expect("config keys are sectioned");
        let value = match v {
            ConfigValue::Int(i) => toml::Value::Integer(i),
            ConfigValue::Float(f) => toml::Value::Float(f),
            ConfigValue::Bool(b) => toml::Value::Boolean(b),
            ConfigValue::Str(s) => toml::Value::String(s),
            ConfigValue::List(l) => {
                toml::Value::Array(l.into_iter().map(toml::Value::Float).collect())
            }
        };
        root.entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("section is a table")
            .insert(name.to_string(), value);
    }
    toml::to_string(&root).expect("plain values serialize")
}

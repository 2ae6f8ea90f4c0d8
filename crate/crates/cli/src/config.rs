//! Flat JSON configuration: defaults, then the `--config` file, then
//! `--set key=value` pairs, then explicit flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub fn merged(
    defaults: Value,
    config: Option<&Path>,
    sets: &[String],
    flags: Value,
) -> Result<Map<String, Value>, CliError> {
    let mut map = into_object(defaults, "defaults")?;
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| {
            CliError::Usage(format!("config {} is not valid JSON: {e}", path.display()))
        })?;
        overlay(&mut map, into_object(file, "config file")?)?;
    }
    for entry in sets {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{entry}`")))?;
        // bare words that are not JSON are taken as strings
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        let mut one = Map::new();
        one.insert(key.trim().to_owned(), value);
        overlay(&mut map, one)?;
    }
    overlay(&mut map, into_object(flags, "flags")?)?;
    Ok(map)
}

fn into_object(v: Value, what: &str) -> Result<Map<String, Value>, CliError> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Usage(format!(
            "{what} must be a flat JSON object"
        ))),
    }
}

fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>) -> Result<(), CliError> {
    for (k, v) in top {
        if matches!(v, Value::Object(_) | Value::Array(_)) {
            return Err(CliError::Usage(format!(
                "config key `{k}` must be a scalar"
            )));
        }
        if !v.is_null() {
            base.insert(k, v);
        }
    }
    Ok(())
}

pub fn parse<T: DeserializeOwned>(map: Map<String, Value>) -> Result<T, CliError> {
    serde_json::from_value(Value::Object(map))
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

pub fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("config types serialize")
}

pub fn take_path(map: &mut Map<String, Value>, key: &str) -> Result<Option<String>, CliError> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(CliError::Usage(format!(
            "`{key}` must be a path string, got {other}"
        ))),
    }
}

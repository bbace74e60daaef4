//! Flat dotted-key configuration. A JSON file supplies base values;
//! command-line flags with the same names override them.

use std::path::PathBuf;

use indexmap::IndexMap;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Default)]
pub struct RunConfig {
    values: IndexMap<String, Value>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    /// Build from a flag list, loading `--config` (if present) first so
    /// flags beat file values.
    pub fn from_flags(flags: &[(String, String)]) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some((_, path)) = flags.iter().find(|(k, _)| k == "config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("config {path}: {e}")))?;
            let parsed: Value = serde_json::from_str(&text)
                .map_err(|e| usage(format!("config {path}: {e}")))?;
            let obj = parsed
                .as_object()
                .ok_or_else(|| usage(format!("config {path}: expected a JSON object")))?;
            for (k, v) in obj {
                if v.is_object() || v.is_array() {
                    return Err(usage(format!(
                        "config {path}: key {k} must be a scalar (flat dotted keys)"
                    )));
                }
                cfg.values.insert(k.clone(), v.clone());
            }
        }
        for (k, raw) in flags {
            if k == "config" {
                continue;
            }
            // flag values keep JSON typing when they parse as JSON
            let v = serde_json::from_str::<Value>(raw)
                .ok()
                .filter(|v| !v.is_object() && !v.is_array())
                .unwrap_or_else(|| Value::String(raw.clone()));
            cfg.values.insert(k.clone(), v);
        }
        Ok(cfg)
    }

    pub fn str_opt(&self, key: &str) -> Result<Option<String>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Ok(Some(v.to_string())),
        }
    }

    pub fn str_required(&self, key: &str) -> Result<String, CliError> {
        self.str_opt(key)?.ok_or_else(|| usage(format!("missing required --{key}")))
    }

    pub fn path_required(&self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.str_required(key)?))
    }

    pub fn path_opt(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        Ok(self.str_opt(key)?.map(PathBuf::from))
    }

    pub fn f32_or(&self, key: &str, default: f32) -> Result<f32, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| usage(format!("--{key}: expected a number, got {v}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| usage(format!("--{key}: expected a non-negative integer, got {v}"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(v) => Err(usage(format!("--{key}: expected true or false, got {v}"))),
        }
    }

    pub fn str_or(&self, key: &str, default: &str) -> Result<String, CliError> {
        Ok(self.str_opt(key)?.unwrap_or_else(|| default.to_string()))
    }

    /// --seed, then config "seed", then MEDIVLAD_SEED, then 0.
    pub fn seed(&self) -> Result<u64, CliError> {
        if let Some(v) = self.values.get("seed") {
            return v
                .as_u64()
                .ok_or_else(|| usage(format!("--seed: expected an unsigned integer, got {v}")));
        }
        match std::env::var("MEDIVLAD_SEED") {
            Ok(s) => s
                .parse::<u64>()
                .map_err(|_| usage(format!("MEDIVLAD_SEED: expected an unsigned integer, got {s}"))),
            Err(_) => Ok(0),
        }
    }
}

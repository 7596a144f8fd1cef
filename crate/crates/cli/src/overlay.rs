//! Config-file overlay: `key = value` lines merged under explicit flags.
//!
//! Resolution order per option: explicit flag, then config file, then the
//! built-in default. Unknown keys are rejected, like unknown flags.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::errors::{CliError, CliResult};

pub struct Overlay {
    values: HashMap<String, String>,
}

impl Overlay {
    pub fn empty() -> Self {
        Overlay { values: HashMap::new() }
    }

    /// Parse a config file and verify every key is in `allowed`.
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::empty()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("config file {}: {e}", path.display())))?;
        let mut values = HashMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "config line {}: expected 'key = value', got '{line}'",
                    ln + 1
                )));
            };
            let key = key.trim().to_string();
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "config line {}: unknown key '{key}'",
                    ln + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Overlay { values })
    }

    /// flag > file > default.
    pub fn resolve<T: FromStr + Copy>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                CliError::Config(format!("config key '{key}': cannot parse '{raw}'"))
            }),
        }
    }

    /// String-valued variant of [`Overlay::resolve`].
    pub fn resolve_string(&self, flag: Option<&str>, key: &str, default: &str) -> String {
        if let Some(v) = flag {
            return v.to_string();
        }
        self.values.get(key).cloned().unwrap_or_else(|| default.to_string())
    }
}

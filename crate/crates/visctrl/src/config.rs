//! Flat key=value run configuration.
//!
//! One `key=value` per line, `#` comments, UTF-8. Unknown and duplicate
//! keys are rejected so a config diff always means a behavior diff, and
//! every command echoes its fully resolved configuration at the top of
//! its report so a run can be reproduced from the report alone.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed configuration: order-preserving for echoes, hashed for lookup.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if cfg.index.contains_key(&key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            cfg.index.insert(key.clone(), cfg.entries.len());
            cfg.entries.push((key, value));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Rejects any key outside the command's allowlist, naming it.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        for (key, _) in &self.entries {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.entries[i].1.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required config key '{key}'")))
    }

    fn parse_with<T>(&self, key: &str, value: &str, what: &str) -> Result<T>
    where
        T: std::str::FromStr,
    {
        value.parse().map_err(|_| {
            Error::Config(format!("config key '{key}': '{value}' is not {what}"))
        })
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        self.parse_with(key, v, "a non-negative integer")
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(v) => self.parse_with(key, v, "a non-negative integer"),
            None => Ok(default),
        }
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            Some(v) => Ok(Some(self.parse_with(key, v, "a non-negative integer")?)),
            None => Ok(None),
        }
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        let v = self.require(key)?;
        self.parse_with(key, v, "a 64-bit unsigned integer")
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(v) => self.parse_with(key, v, "a real number"),
            None => Ok(default),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::Config(format!(
                "config key '{key}': '{v}' is not a boolean (true/false)"
            ))),
            None => Ok(default),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    /// Comma-separated list of non-negative integers.
    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for part in v.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            out.push(self.parse_with(key, part, "a non-negative integer")?);
        }
        if out.is_empty() {
            return Err(Error::Config(format!("config key '{key}' lists no values")));
        }
        Ok(Some(out))
    }
}

/// Ordered resolved-configuration echo rendered as key=value lines.
#[derive(Debug, Clone, Default)]
pub struct ConfigEcho {
    entries: Vec<(String, String)>,
}

impl ConfigEcho {
    pub fn new() -> ConfigEcho {
        ConfigEcho::default()
    }

    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

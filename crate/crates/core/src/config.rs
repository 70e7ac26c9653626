//! Flat `key=value` configuration with dot-scoped keys (`stage1.steps=200`).
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear only
//! once. The canonical text form sorts keys, so its hash does not depend on
//! the order lines were written in.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
        && !key.starts_with('.')
        && !key.ends_with('.')
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", n + 1),
                    format!("expected key=value, got {line:?}"),
                ));
            };
            let key = k.trim();
            if !valid_key(key) {
                return Err(Error::config(key, format!("invalid key on line {}", n + 1)));
            }
            if cfg.entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(key, format!("duplicate key on line {}", n + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override, replacing any existing value.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let Some((k, v)) = spec.split_once('=') else {
            return Err(Error::config(spec, "override must look like key=value"));
        };
        let key = k.trim();
        if !valid_key(key) {
            return Err(Error::config(key, "invalid key"));
        }
        if v.contains('\n') {
            return Err(Error::config(key, "value must be a single line"));
        }
        self.entries.insert(key.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require_str(&self, key: &str) -> Result<&str> {
        self.get_str(key)
            .ok_or_else(|| Error::config(key, "required key is missing"))
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get_str(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::config(key, format!("cannot parse {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::config(key, "required key is missing"))
    }

    /// Keys under `prefix.` with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> FlatConfig {
        let p = format!("{prefix}.");
        FlatConfig {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|k| (k.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects keys outside `allowed`. An entry ending in `.*` admits any key
    /// with that prefix.
    pub fn ensure_known(&self, allowed: &[&str]) -> Result<()> {
        for key in self.keys() {
            let ok = allowed.iter().any(|a| match a.strip_suffix('*') {
                Some(prefix) => key.starts_with(prefix),
                None => key == *a,
            });
            if !ok {
                return Err(Error::config(key, "unknown key"));
            }
        }
        Ok(())
    }

    /// Sorted `key=value` lines.
    pub fn to_canonical_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_canonical_text())
    }
}

/// Parses `true`/`false`/`1`/`0`/`yes`/`no`.
pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got {v:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_scopes() {
        let c = FlatConfig::parse("# comment\nseed = 7\n\nstage1.steps=20\nstage2.steps=5\n").unwrap();
        assert_eq!(c.require::<u64>("seed").unwrap(), 7);
        assert_eq!(c.scoped("stage1").require::<usize>("steps").unwrap(), 20);
        assert_eq!(c.get::<usize>("missing").unwrap(), None);
    }

    #[test]
    fn errors_name_the_key() {
        let c = FlatConfig::parse("steps=abc").unwrap();
        match c.get::<usize>("steps") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "steps"),
            other => panic!("{other:?}"),
        }
        assert!(FlatConfig::parse("a=1\na=2").is_err());
        assert!(FlatConfig::parse("no equals sign").is_err());
        assert!(FlatConfig::parse("bad key=1").is_err());
    }

    #[test]
    fn hash_ignores_line_order() {
        let a = FlatConfig::parse("a=1\nb=2").unwrap();
        let b = FlatConfig::parse("b=2\n a = 1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(FlatConfig::parse(&a.to_canonical_text()).unwrap(), a);
    }

    #[test]
    fn unknown_keys_rejected() {
        let c = FlatConfig::parse("a=1\nstage1.x=2").unwrap();
        assert!(c.ensure_known(&["a", "stage1.*"]).is_ok());
        assert!(c.ensure_known(&["a"]).is_err());
    }
}

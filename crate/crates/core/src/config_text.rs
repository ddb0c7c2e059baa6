//! `key=value` configuration blocks and their stable digests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered `key=value` pairs. Keys are kept sorted, which makes the
/// rendered text canonical.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigBlock {
    entries: BTreeMap<String, String>,
}

impl ConfigBlock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.entries.insert(key.to_string(), value.to_string());
        self
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.set(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing config key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value `{raw}` for config key `{key}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Copy restricted to keys that do not start with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ConfigBlock {
        ConfigBlock {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| !k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse_line(&mut self, line: &str) -> Result<()> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("expected key=value, got `{line}`")))?;
        self.entries.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut block = Self::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            block.parse_line(line)?;
        }
        Ok(block)
    }

    /// First 16 hex digits of SHA-256 over the canonical text.
    pub fn hash(&self) -> String {
        digest(&self.to_text())
    }
}

pub fn digest(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    hex::encode(&d[..8])
}

//! Plain-text `key = value` configuration.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Keys may
//! contain dots (`b_p3.gamma`). Every key must be consumed by whoever applies
//! the config, so typos surface as errors instead of silently using defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", i + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), i + 1))
                .is_some()
            {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse '{v}' for '{key}'"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Moves every `prefix`-prefixed key into a new config, prefix stripped.
    pub fn split_prefix(&mut self, prefix: &str) -> Self {
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let entries = keys
            .into_iter()
            .map(|k| {
                let v = self.entries.remove(&k).unwrap();
                (k[prefix.len()..].to_string(), v)
            })
            .collect();
        Self { entries }
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Config(format!("line {line}: unknown key '{k}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let mut c = Config::parse("# header\n\nseed = 7  # trailing\nmodel= plant\n").unwrap();
        assert_eq!(c.take::<u64>("seed").unwrap(), Some(7));
        assert_eq!(c.take::<String>("model").unwrap().as_deref(), Some("plant"));
        c.finish().unwrap();
    }

    #[test]
    fn unknown_key_is_an_error() {
        let c = Config::parse("sede = 3").unwrap();
        let err = c.finish().unwrap_err().to_string();
        assert!(err.contains("unknown key 'sede'"), "{err}");
    }

    #[test]
    fn bad_lines_are_errors() {
        assert!(Config::parse("novalue").is_err());
        assert!(Config::parse("a = 1\na = 2").is_err());
        let mut c = Config::parse("a = x").unwrap();
        assert!(c.take::<f64>("a").is_err());
    }
}

//! Plain-text `key=value` configuration.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys are
//! kept sorted so rendering is deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn set_vec(&mut self, key: impl Into<String>, values: &[f64]) {
        self.set(key, format_vec(values));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("cannot parse `{key}={v}`")))
            })
            .transpose()
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse_value(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn vec(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key).map(|v| parse_vec(key, v)).transpose()
    }

    pub fn require_vec(&self, key: &str) -> Result<Vec<f64>> {
        parse_vec(key, self.require(key)?)
    }

    /// Overlays `other` on top of `self`; keys in `other` win.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn format_vec(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_vec(key: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Config(format!("cannot parse `{key}={text}` as a list of numbers"))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let cfg = KvConfig::parse("# header\n\na = 1 # trailing\nb=x=y\n").unwrap();
        assert_eq!(cfg.get("a"), Some("1"));
        assert_eq!(cfg.get("b"), Some("x=y"));
        assert_eq!(cfg.len(), 2);
    }

    #[test]
    fn rejects_missing_equals() {
        assert!(matches!(KvConfig::parse("oops"), Err(Error::Config(_))));
    }

    #[test]
    fn merge_overrides() {
        let mut a = KvConfig::parse("k=1\nj=2").unwrap();
        a.merge(&KvConfig::parse("k=3").unwrap());
        assert_eq!(a.get("k"), Some("3"));
        assert_eq!(a.get("j"), Some("2"));
    }

    #[test]
    fn vectors_round_trip_exactly() {
        let v = vec![0.1, -1.5, 1e-300, 12345.678901234567];
        let mut cfg = KvConfig::new();
        cfg.set_vec("v", &v);
        let back = KvConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back.require_vec("v").unwrap(), v);
    }
}

//! Flat `key=value` documents: one pair per line, `#` starts a comment,
//! blank lines are ignored. Keys keep their first-seen order.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{AsdError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    pub entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AsdError::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            doc.set(k.trim(), v.trim());
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AsdError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a single `key=value` override.
    pub fn parse_override(arg: &str) -> Result<(String, String)> {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| AsdError::Config(format!("override {arg:?} is not key=value")))?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| AsdError::Config(format!("bad value {value:?} for {key}: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(AsdError::Config(format!("bad value {value:?} for {key}: expected true/false"))),
    }
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

pub fn render_list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let doc = KvDoc::parse("# header\na = 1\n\nb=x # trailing\na=2\n").unwrap();
        assert_eq!(doc.get("a"), Some("2"));
        assert_eq!(doc.get("b"), Some("x"));
        assert_eq!(doc.entries.len(), 2);
        assert!(KvDoc::parse("novalue\n").is_err());
    }

    #[test]
    fn list_round_trip() {
        let v = vec![0.5, 1e-3, 2.0];
        assert_eq!(parse_list("k", &render_list(&v)).unwrap(), v);
        assert!(parse_list("k", "").unwrap().is_empty());
    }
}

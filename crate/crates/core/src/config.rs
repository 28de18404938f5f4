//! Flat `key = value` configuration files: UTF-8, one pair per line, `#`
//! starts a comment. Unknown keys are errors, reported with line numbers.

use std::str::FromStr;

use crate::error::{Error, Result};

pub struct KvReader {
    entries: Vec<Entry>,
}

struct Entry {
    key: String,
    value: String,
    line: usize,
    used: std::cell::Cell<bool>,
}

impl KvReader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some(eq) = stripped.find('=') else {
                return Err(Error::Parse { line, msg: format!("expected `key = value`, got `{stripped}`") });
            };
            let key = stripped[..eq].trim().to_string();
            let value = stripped[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse { line, msg: "empty key".into() });
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(Error::Parse { line, msg: format!("duplicate key `{key}`") });
            }
            entries.push(Entry { key, value, line, used: std::cell::Cell::new(false) });
        }
        Ok(Self { entries })
    }

    pub fn get_str(&self, key: &str) -> Option<String> {
        self.entries.iter().find(|e| e.key == key).map(|e| {
            e.used.set(true);
            e.value.clone()
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.iter().find(|e| e.key == key) {
            None => Ok(None),
            Some(e) => {
                e.used.set(true);
                e.value.parse::<T>().map(Some).map_err(|_| Error::Parse {
                    line: e.line,
                    msg: format!("cannot parse `{}` for key `{}`", e.value, e.key),
                })
            }
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn require_str(&self, key: &str) -> Result<String> {
        self.get_str(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Comma-separated list value.
    pub fn get_list(&self, key: &str) -> Option<Vec<String>> {
        self.get_str(key).map(|v| {
            v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        })
    }

    /// All `prefix.<suffix>` entries, marking them used.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, String)> {
        let dotted = format!("{prefix}.");
        self.entries
            .iter()
            .filter(|e| e.key.starts_with(&dotted))
            .map(|e| {
                e.used.set(true);
                (e.key[dotted.len()..].to_string(), e.value.clone())
            })
            .collect()
    }

    /// Fail on keys nothing consumed: typos are configuration errors.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|e| !e.used.get())
            .map(|e| format!("`{}` (line {})", e.key, e.line))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

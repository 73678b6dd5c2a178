//! `key = value` text configs.
//!
//! Every config struct in the crate (network, training, augmentation,
//! phantom) is persisted in this format: one pair per line, `#` starts a
//! comment, unknown keys are rejected so typos do not silently fall back to
//! defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value pairs, consumed field by field.
#[derive(Debug, Default, Clone)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("duplicate key {key:?}")));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::parse(&text)
    }

    /// Removes and parses `key` into `slot` when present.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|e| Error::Parse(format!("{key}: cannot parse {v:?}: {e}")))?;
        }
        Ok(())
    }

    /// Like [`take`](Self::take) for comma-separated lists.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| Error::Parse(format!("{key}: cannot parse {s:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Parse(format!("unknown key {k:?}"))),
        }
    }
}

/// Builds a config file body, preserving insertion order.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn put_list<T: Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.put(key, joined.join(","))
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.out)
    }
}

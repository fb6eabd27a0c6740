//! Flat `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Keys
//! are tracked as they are read so that a caller can reject typos once every
//! section has taken what it understands.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            if entries
                .insert(k.to_string(), (v.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Self {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| {
            self.used.borrow_mut().insert(key.to_string());
            v.as_str()
        })
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.to_string());
        v.parse::<T>().map(Some).map_err(|e| Error::Parse {
            line: *line,
            msg: format!("`{key}`: {e}"),
        })
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Keys that no section has read.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }

    pub fn deny_unused(&self) -> Result<()> {
        match self.unused().as_slice() {
            [] => Ok(()),
            keys => Err(Error::Config(format!("unknown keys: {}", keys.join(", ")))),
        }
    }
}

/// Renders `(key, value)` pairs in the same format [`KvMap::parse`] reads.
pub fn render<K: Display, V: Display>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_types() {
        let kv = KvMap::parse("# header\nchannels = 32\n\ngamma = 0.7 # inline\nname=x\n").unwrap();
        assert_eq!(kv.get::<usize>("channels").unwrap(), Some(32));
        assert_eq!(kv.get::<f64>("gamma").unwrap(), Some(0.7));
        assert_eq!(kv.get::<usize>("missing").unwrap(), None);
        assert_eq!(kv.unused(), vec!["name".to_string()]);
        assert!(kv.deny_unused().is_err());
    }

    #[test]
    fn reports_line_numbers() {
        let err = KvMap::parse("a = 1\nbroken\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let kv = KvMap::parse("\n\nx = abc\n").unwrap();
        assert!(matches!(
            kv.get::<f64>("x"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(KvMap::parse("a = 1\na = 2\n").is_err());
    }
}

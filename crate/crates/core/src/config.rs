//! Plain `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored; trailing `# comments` are
//! stripped. Keys are unique.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
    source: String,
    base_dir: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Line { path: source.to_owned(), line: line_no, detail };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(err(format!("invalid key `{k}`")));
            }
            if entries.insert(k.to_owned(), (v.to_owned(), line_no)).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
        }
        Ok(Config { entries, source: source.to_owned(), base_dir: None })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed value, or `default` when the key is absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|e| Error::Line {
                path: self.source.clone(),
                line: *line,
                detail: format!("bad value `{v}` for `{key}`: {e}"),
            }),
        }
    }

    /// Comma-separated list of values.
    pub fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|e| Error::Line {
                        path: self.source.clone(),
                        line: *line,
                        detail: format!("bad list item `{}` for `{key}`: {e}", s.trim()),
                    })
                })
                .collect(),
        }
    }

    /// Path value resolved relative to the config file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|v| match &self.base_dir {
            Some(base) if Path::new(v).is_relative() => base.join(v),
            _ => PathBuf::from(v),
        })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_owned(), (value.to_string(), 0));
    }
}

//! Flat `key = value` configuration text.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, IoContext, Result};

/// Parsed key/value pairs with the line each key came from.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    detail: format!("expected key=value, got {line:?}"),
                });
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (idx + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    detail: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { path: path.to_path_buf(), entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, path)
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|e| Error::Parse {
                path: self.path.clone(),
                line,
                detail: format!("{key}: {e}"),
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Fails on keys nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => {
                Err(Error::Parse { path: self.path, line, detail: format!("unknown key {k:?}") })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_typed_keys() {
        let mut kv = KeyValues::parse("# comment\nd = 32\nlr=0.001 # inline\n\ntask = tfl\n", Path::new("c")).unwrap();
        assert_eq!(kv.take::<usize>("d").unwrap(), Some(32));
        assert_eq!(kv.take::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(kv.take_or::<usize>("l", 3).unwrap(), 3);
        assert!(kv.clone().finish().is_err());
        assert_eq!(kv.take::<String>("task").unwrap().as_deref(), Some("tfl"));
        kv.finish().unwrap();
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(KeyValues::parse("d 32", Path::new("c")), Err(Error::Parse { line: 1, .. })));
        assert!(KeyValues::parse("d=1\nd=2", Path::new("c")).is_err());
        let mut kv = KeyValues::parse("d = x", Path::new("c")).unwrap();
        assert!(kv.take::<usize>("d").is_err());
    }
}

//! Flat `key = value` text files with `#` comments.
//!
//! Used for checkpoint manifests, sequence metadata and run configs.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
    origin: Option<PathBuf>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut m = Manifest {
            entries: Vec::new(),
            origin: Some(origin.to_path_buf()),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    detail: format!("expected `key = value`, got {raw:?}"),
                });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    detail: "empty key".into(),
                });
            }
            m.set(key, v.trim());
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    /// Inserts or replaces, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn origin(&self) -> PathBuf {
        self.origin
            .clone()
            .unwrap_or_else(|| PathBuf::from("<manifest>"))
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format {
            path: self.origin(),
            detail: format!("missing key `{key}`"),
        })
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e: T::Err| Error::Format {
            path: self.origin(),
            detail: format!("bad value for `{key}`: {raw:?} ({e})"),
        })
    }
}

impl std::fmt::Display for Manifest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let text = "# header\n\npreset = desk  # trailing\nseed=7\n";
        let m = Manifest::parse(text, Path::new("t")).unwrap();
        assert_eq!(m.get("preset"), Some("desk"));
        assert_eq!(m.parse_value::<u64>("seed").unwrap(), 7);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = Manifest::parse("a = 1\nnonsense\n", Path::new("cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn set_replaces_in_place() {
        let mut m = Manifest::new();
        m.set("a", 1);
        m.set("b", 2);
        m.set("a", 3);
        assert_eq!(m.to_string(), "a = 3\nb = 2\n");
    }
}

//! `key = value` run configuration: defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use cdfnet::{Error, Result};

pub const CONFIG_NAME: &str = "config.txt";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("config line {}: expected key = value", n + 1))
            })?;
            values.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        Ok(Settings { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Defaults, overlaid by the file (if any), overlaid by flags that were
    /// given. Keys outside `known` are rejected.
    pub fn resolve(
        known: &[(&str, &str)],
        file: Option<&Path>,
        flags: &[(&str, Option<String>)],
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> = known
            .iter()
            .filter(|(_, d)| !d.is_empty())
            .map(|(k, d)| ((*k).to_owned(), (*d).to_owned()))
            .collect();
        if let Some(path) = file {
            for (k, v) in Self::load(path)?.values {
                if !known.iter().any(|(name, _)| *name == k) {
                    return Err(Error::Usage(format!(
                        "unknown key {k:?} in {}",
                        path.display()
                    )));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert((*k).to_owned(), v.clone());
            }
        }
        Ok(Settings { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| Error::Usage(format!("missing required setting --{key}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Usage(format!("invalid value {v:?} for {key}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None | Some("none") => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "on" | "true" | "yes" => Ok(true),
            "off" | "false" | "no" => Ok(false),
            v => Err(Error::Usage(format!("{key} must be on or off, got {v:?}"))),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Writes the resolved settings to `dir/config.txt`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)
            .map_err(|e| Error::Usage(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(CONFIG_NAME);
        fs::write(&path, self.render())
            .map_err(|e| Error::Usage(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "# run\nseed = 3\nepochs = 7  # short\n").unwrap();
        let s = Settings::resolve(
            &[("seed", "0"), ("epochs", "40"), ("lr", "0.01")],
            Some(&path),
            &[("epochs", Some("9".into())), ("lr", None)],
        )
        .unwrap();
        assert_eq!(s.get::<u64>("seed").unwrap(), 3);
        assert_eq!(s.get::<usize>("epochs").unwrap(), 9);
        assert_eq!(s.raw("lr"), Some("0.01"));
        assert_eq!(Settings::parse(&s.render()).unwrap(), s);
    }

    #[test]
    fn unknown_keys_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "colour = red\n").unwrap();
        assert!(Settings::resolve(&[("seed", "0")], Some(&path), &[]).is_err());
        assert!(Settings::parse("just words").is_err());
    }
}

//! Plain-text configuration files with dotted section keys.
//!
//! A file holds `section.key=value` lines (`#` comments and blank lines
//! ignored). Each subcommand reads only its own section; flags always win
//! over file values. Unused keys in the active section are reported as
//! configuration errors so typos never pass silently.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use lcslab::{Error, Result};

#[derive(Debug)]
pub struct Settings {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
    section: &'static str,
}

impl Settings {
    /// Load the file when given; an absent path yields empty settings.
    pub fn load(path: Option<&Path>, section: &'static str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(Error::config(format!(
                        "config line {}: expected key=value, got '{line}'",
                        lineno + 1
                    )));
                };
                let key = key.trim().to_string();
                if !key.contains('.') {
                    return Err(Error::config(format!(
                        "config line {}: key '{key}' needs a section prefix like 'train.{key}'",
                        lineno + 1
                    )));
                }
                if entries
                    .insert(key.clone(), value.trim().to_string())
                    .is_some()
                {
                    return Err(Error::config(format!(
                        "config line {}: duplicate key '{key}'",
                        lineno + 1
                    )));
                }
            }
        }
        Ok(Self {
            entries,
            used: RefCell::new(BTreeSet::new()),
            section,
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let full = format!("{}.{key}", self.section);
        let value = self.entries.get(&full)?;
        self.used.borrow_mut().insert(full);
        Some(value)
    }

    /// String value: flag, else file, else default. The file key counts as
    /// consumed even when a flag shadows it.
    pub fn text(&self, key: &str, flag: Option<String>, default: &str) -> String {
        let file = self.raw(key).map(str::to_string);
        flag.or(file).unwrap_or_else(|| default.to_string())
    }

    /// Optional string value: flag, else file, else None.
    pub fn text_opt(&self, key: &str, flag: Option<String>) -> Option<String> {
        let file = self.raw(key).map(str::to_string);
        flag.or(file)
    }

    /// Parsed value: flag, else file, else default. A flag shadows the file
    /// value entirely (it is not parsed), but still consumes the key.
    pub fn value<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let file = self.raw(key);
        match flag {
            Some(v) => Ok(v),
            None => match file {
                Some(text) => text.parse().map_err(|e| {
                    Error::config(format!("config key '{}.{key}': {e}", self.section))
                }),
                None => Ok(default),
            },
        }
    }

    /// A value that must come from somewhere: flag, else file, else error.
    pub fn required(&self, key: &str, flag: Option<String>) -> Result<String> {
        self.text_opt(key, flag).ok_or_else(|| {
            Error::config(format!(
                "missing --{key} (or config key '{}.{key}')",
                self.section
            ))
        })
    }

    /// Error on any key of the active section that was never read.
    pub fn finish(&self) -> Result<()> {
        let prefix = format!("{}.", self.section);
        let used = self.used.borrow();
        for key in self.entries.keys() {
            if key.starts_with(&prefix) && !used.contains(key) {
                return Err(Error::config(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn flags_override_file_values_and_defaults_fill_in() {
        let f = file("# comment\ntrain.epochs=5\ntrain.lr=0.01\n\nsynth.seed=3\n");
        let s = Settings::load(Some(f.path()), "train").unwrap();
        assert_eq!(s.value("epochs", Some(9usize), 20).unwrap(), 9);
        assert_eq!(s.value::<usize>("epochs", None, 20).unwrap(), 5);
        assert_eq!(s.value::<f64>("lr", None, 1e-4).unwrap(), 0.01);
        assert_eq!(s.value::<usize>("batch", None, 8).unwrap(), 8);
        s.finish().unwrap();
    }

    #[test]
    fn foreign_sections_are_ignored_but_own_typos_are_caught() {
        let f = file("synth.seed=3\ntrain.epoochs=5\n");
        let s = Settings::load(Some(f.path()), "train").unwrap();
        assert!(s.finish().unwrap_err().to_string().contains("epoochs"));
    }

    #[test]
    fn malformed_lines_are_rejected() {
        for bad in ["no_equals_here", "nosection=1"] {
            let f = file(&format!("{bad}\n"));
            assert!(Settings::load(Some(f.path()), "train").is_err(), "{bad}");
        }
        let f = file("train.a=1\ntrain.a=2\n");
        assert!(Settings::load(Some(f.path()), "train")
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    #[test]
    fn required_keys_report_both_spellings() {
        let s = Settings::load(None, "segment").unwrap();
        let err = s.required("dataset", None).unwrap_err().to_string();
        assert!(err.contains("--dataset") && err.contains("segment.dataset"));
    }
}

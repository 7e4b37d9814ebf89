//! Plain-text `key = value` configuration with `[section]` headers. Blank
//! lines and `#` comments are ignored; keys are unique within a section.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value` or `[section]`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("line {line}: `key = value` before any [section] header")]
    NoSection { line: usize },
    #[error("line {line}: key `{key}` appears twice in [{section}]")]
    DuplicateKey { line: usize, section: String, key: String },
    #[error("[{section}] {key}: expected {expected}, got `{value}`")]
    BadValue { section: String, key: String, value: String, expected: &'static str },
    #[error("[{section}] is missing required key `{key}`")]
    MissingKey { section: String, key: String },
}

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile, ConfigError> {
        let mut cfg = ConfigFile::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| !n.is_empty() && !n.contains('['))
                    .ok_or_else(|| ConfigError::BadLine { line, text: trimmed.to_string() })?;
                cfg.sections.entry(name.to_string()).or_default();
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| ConfigError::BadLine { line, text: trimmed.to_string() })?;
            let section = section.as_ref().ok_or(ConfigError::NoSection { line })?;
            let entries = cfg.sections.get_mut(section).expect("section was just inserted");
            if entries.contains_key(key) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    section: section.clone(),
                    key: key.to_string(),
                });
            }
            entries.insert(key.to_string(), value.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ConfigFile, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Canonical text form, sections and keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            let _ = writeln!(out, "[{name}]");
            for (key, value) in entries {
                let _ = writeln!(out, "{key} = {value}");
            }
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, ConfigError> {
        self.get(section, key).ok_or_else(|| ConfigError::MissingKey {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    fn parsed<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                value: raw.to_string(),
                expected,
            }),
        }
    }

    pub fn f64_opt(&self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        self.parsed(section, key, "a real number")
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.f64_opt(section, key)?.unwrap_or(default))
    }

    pub fn usize_opt(&self, section: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        self.parsed(section, key, "a non-negative integer")
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.usize_opt(section, key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64, ConfigError> {
        Ok(self.parsed(section, key, "a non-negative integer")?.unwrap_or(default))
    }

    pub fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(raw) => Err(ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                value: raw.to_string(),
                expected: "`true` or `false`",
            }),
        }
    }

    pub fn str_or<'a>(&'a self, section: &str, key: &str, default: &'a str) -> &'a str {
        self.get(section, key).unwrap_or(default)
    }

    /// Comma-separated list of reals, e.g. `0.1, -2, 3e-4`.
    pub fn vec_f64(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(raw) = self.get(section, key) else { return Ok(None) };
        let bad = |_| ConfigError::BadValue {
            section: section.to_string(),
            key: key.to_string(),
            value: raw.to_string(),
            expected: "a comma-separated list of reals",
        };
        raw.split(',')
            .map(|entry| entry.trim().parse().map_err(bad))
            .collect::<Result<_, _>>()
            .map(Some)
    }

    /// Comma-separated list of sizes, e.g. `128, 128`.
    pub fn vec_usize(&self, section: &str, key: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        let Some(raw) = self.get(section, key) else { return Ok(None) };
        let bad = |_| ConfigError::BadValue {
            section: section.to_string(),
            key: key.to_string(),
            value: raw.to_string(),
            expected: "a comma-separated list of sizes",
        };
        raw.split(',')
            .map(|entry| entry.trim().parse().map_err(bad))
            .collect::<Result<_, _>>()
            .map(Some)
    }

    /// Semicolon-separated rows of comma-separated reals, flattened
    /// row-major; rows must share a width.
    pub fn matrix(
        &self,
        section: &str,
        key: &str,
    ) -> Result<Option<(usize, Vec<f64>)>, ConfigError> {
        let Some(raw) = self.get(section, key) else { return Ok(None) };
        let bad = || ConfigError::BadValue {
            section: section.to_string(),
            key: key.to_string(),
            value: raw.to_string(),
            expected: "semicolon-separated rows of comma-separated reals",
        };
        let mut width = 0;
        let mut flat = Vec::new();
        for row in raw.split(';') {
            let entries: Vec<f64> = row
                .split(',')
                .map(|e| e.trim().parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()?;
            if width == 0 {
                width = entries.len();
            } else if entries.len() != width {
                return Err(bad());
            }
            flat.extend(entries);
        }
        Ok(Some((width, flat)))
    }
}

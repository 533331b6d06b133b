//! Plain-text configuration: `key = value` lines grouped under `[section]`
//! headers. `#` and `;` start comment lines. Keys before the first header
//! belong to the unnamed section `""`.
//!
//! ```text
//! seed = 7
//!
//! [prepare]
//! window = 300
//! mode = amplitude
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("[{section}] {key} = '{value}': {reason}")]
    Invalid {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("[{section}] missing required key '{key}'")]
    Missing { section: String, key: String },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Config::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    reason: "section header without closing ']'".into(),
                })?;
                let name = name.trim();
                if name.is_empty() {
                    return Err(ConfigError::Syntax {
                        line,
                        reason: "empty section name".into(),
                    });
                }
                current = name.to_string();
                config.sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                reason: format!("expected 'key = value', got '{trimmed}'"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    reason: "empty key".into(),
                });
            }
            let section = config.sections.entry(current.clone()).or_default();
            if section
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(ConfigError::Syntax {
                    line,
                    reason: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Config::parse(&text)?)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    /// Sets or replaces a value (used for command line overrides).
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    /// Section names in sorted order.
    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    pub fn keys(&self, section: &str) -> impl Iterator<Item = (&str, &str)> {
        self.sections
            .get(section)
            .into_iter()
            .flat_map(|s| s.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Parses a value if present.
    pub fn parsed<T>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e: T::Err| ConfigError::Invalid {
                    section: section.to_string(),
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                }),
        }
    }

    pub fn parsed_or<T>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.parsed(section, key)?.unwrap_or(default))
    }

    /// Comma-separated list, e.g. `delays_ns = 0, 35.5, 80`.
    pub fn list<T>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(v) = self.get(section, key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse().map_err(|e: T::Err| ConfigError::Invalid {
                    section: section.to_string(),
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: format!("'{p}': {e}"),
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_values() {
        let c = Config::parse("seed = 3\n# note\n[prepare]\nwindow = 300 \n mode=phase\n[empty]\n")
            .unwrap();
        assert_eq!(c.get("", "seed"), Some("3"));
        assert_eq!(c.parsed::<usize>("prepare", "window").unwrap(), Some(300));
        assert_eq!(c.get("prepare", "mode"), Some("phase"));
        assert!(c.has_section("empty"));
        assert_eq!(c.parsed_or("prepare", "missing", 7u32).unwrap(), 7);
    }

    #[test]
    fn syntax_errors_name_line() {
        assert!(matches!(
            Config::parse("[a\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("a = 1\nnovalue\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("a = 1\na = 2\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
    }

    #[test]
    fn typed_errors() {
        let c = Config::parse("[x]\nn = abc\nl = 1, 2,x\n").unwrap();
        assert!(matches!(
            c.parsed::<u32>("x", "n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(c.list::<f64>("x", "l").is_err());
        let c = Config::parse("[x]\nl = 1, 2.5\n").unwrap();
        assert_eq!(c.list::<f64>("x", "l").unwrap(), Some(vec![1.0, 2.5]));
    }

    #[test]
    fn overrides() {
        let mut c = Config::parse("[a]\nk = 1\n").unwrap();
        c.set("a", "k", "2");
        assert_eq!(c.get("a", "k"), Some("2"));
    }
}

//! Resolution of option values: command-line flag, then config file, then
//! built-in default. Every resolved value is remembered for the echo.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::Usage;

/// Keys accepted in a config file. Each mirrors a long flag.
pub const KNOWN_KEYS: &[&str] = &[
    "b",
    "baseline",
    "batch",
    "blocks",
    "embed-dim",
    "entries",
    "filters",
    "grid-step",
    "index",
    "k",
    "k1",
    "kb",
    "l2",
    "lr",
    "max-epochs",
    "min-count",
    "model",
    "out",
    "out-dir",
    "patience",
    "pos-weight",
    "pretrained",
    "queries",
    "repetitions",
    "report",
    "seed",
    "seq-len",
    "test",
    "threads",
    "threshold",
    "tokenizer",
    "train",
    "use-answer",
    "valid",
    "variant",
    "verbose",
    "window",
];

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// underscores in keys are read as hyphens.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Usage(format!("config line {}: expected key=value", n + 1)))?;
        let key = k.trim().replace('_', "-");
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Usage(format!("config line {}: unknown key '{}'", n + 1, k.trim())).into());
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Settings {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn lookup<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(raw.parse::<T>().map_err(|e| {
                    Usage(format!("config key '{key}': cannot parse '{raw}': {e}"))
                })?),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    /// Flag, else config file, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.lookup(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    /// Flag, else config file; absent in both is a usage error.
    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.lookup(key, flag)?
            .ok_or_else(|| Usage(format!("missing --{key} (flag or config key)")).into())
    }

    /// Flag, else config file, else nothing.
    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.lookup(key, flag)
    }

    /// Writes every resolved value to standard error.
    pub fn echo(&self, command: &str) {
        let line: Vec<String> = self
            .resolved
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        eprintln!("[{command}] {}", line.join(" "));
    }
}

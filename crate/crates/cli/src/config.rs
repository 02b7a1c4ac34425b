//! Flat `key = value` configuration files.

use std::collections::HashMap;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: HashMap<String, String>,
}

impl Config {
    /// Blank lines and `#` comments are ignored; keys use the long flag names.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {}: expected key=value", k + 1);
            };
            let key = key.trim().trim_start_matches("--").to_string();
            if key.is_empty() {
                bail!("config line {}: empty key", k + 1);
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Flag value if given, else the config entry, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| anyhow!("config key '{key}': bad value '{s}'")),
        }
    }
}

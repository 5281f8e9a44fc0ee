//! Flat `key = value` config files. Keys are flag names without the leading
//! dashes; `#` starts a comment. Precedence is flag > config file > default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        if let Some(k) = cfg.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!("unknown config key {k:?}")));
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            let key = k.trim().trim_start_matches("--").to_owned();
            if values.insert(key.clone(), v.trim().to_owned()).is_some() {
                return Err(CliError::Usage(format!("config key {key:?} given twice")));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Flag value, else the config entry, else `None`.
    pub fn get<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config key {key:?}: invalid value {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn or<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    pub fn required<T>(&self, flag: Option<T>, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
    }
}

/// Comma-separated list such as `1,5,10`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;

/// Why a run stopped early. Usage problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<specialist_ensemble::Error> for Failure {
    fn from(e: specialist_ensemble::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type Outcome<T> = Result<T, Failure>;

/// Values from `--config`, looked up first in the subcommand's table and
/// then at the top level. Flags win over both.
pub struct Settings {
    table: toml::Table,
    section: &'static str,
}

impl Settings {
    pub fn load(path: Option<&Path>, section: &'static str) -> Outcome<Self> {
        let table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Usage(format!("--config: cannot read `{}`: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Failure::Usage(format!("--config: {}", e.message())))?
            }
        };
        Ok(Self { table, section })
    }

    fn raw(&self, key: &str) -> Option<&toml::Value> {
        let file_key = key.replace('-', "_");
        self.table
            .get(self.section)
            .and_then(|t| t.as_table())
            .and_then(|t| t.get(&file_key))
            .or_else(|| self.table.get(&file_key))
    }

    /// Flag, else config value, else `default`.
    pub fn pick<T: DeserializeOwned>(&self, key: &str, flag: Option<T>, default: T) -> Outcome<T> {
        Ok(self.optional(key, flag)?.unwrap_or(default))
    }

    pub fn optional<T: DeserializeOwned>(&self, key: &str, flag: Option<T>) -> Outcome<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e: toml::de::Error| Failure::Usage(format!("--config: `{key}`: {}", e.message()))),
        }
    }

    /// As [`Settings::optional`] for values written as strings and parsed.
    pub fn parsed<T: FromStr>(&self, key: &str, flag: Option<String>) -> Outcome<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.optional::<String>(key, flag)? {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| Failure::Usage(format!("--{key}: {e}"))),
        }
    }

    pub fn path(&self, key: &str, flag: Option<PathBuf>) -> Outcome<Option<PathBuf>> {
        self.optional(key, flag)
    }

    /// A required input path that must exist.
    pub fn input(&self, key: &str, flag: Option<PathBuf>) -> Outcome<PathBuf> {
        let p = self
            .path(key, flag)?
            .ok_or_else(|| Failure::Usage(format!("--{key} is required")))?;
        existing(key, p)
    }
}

pub fn existing(key: &str, p: PathBuf) -> Outcome<PathBuf> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Failure::Usage(format!("--{key}: path `{}` does not exist", p.display())))
    }
}

//! Settings resolution: command-line flag, then the `[subcommand]` table of
//! the TOML config file, then the top level of that file, then a default.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::Failure;

#[derive(Debug, Default)]
pub struct Settings {
    table: toml::Table,
    section: &'static str,
    data_dir: Option<PathBuf>,
}

impl Settings {
    pub fn load(path: Option<&Path>, section: &'static str, data_dir: Option<PathBuf>) -> Result<Self, Failure> {
        let table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::invalid(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Failure::invalid(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut s = Self { table, section, data_dir: None };
        s.data_dir = match data_dir {
            Some(d) => Some(d),
            None => s.file_value::<PathBuf>("data_dir")?,
        };
        Ok(s)
    }

    fn file_value<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, Failure> {
        let v = self
            .table
            .get(self.section)
            .and_then(|t| t.as_table())
            .and_then(|t| t.get(key))
            .or_else(|| self.table.get(key).filter(|v| !v.is_table()));
        match v {
            None => Ok(None),
            Some(v) => v.clone().try_into().map(Some).map_err(|e| Failure::invalid(format!("config key {key}: {e}"))),
        }
    }

    /// The flag value, else the config value, else `None`.
    pub fn opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file_value(key),
        }
    }

    pub fn or<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn need<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T, Failure> {
        self.opt(flag, key)?
            .ok_or_else(|| Failure::invalid(format!("missing required flag --{}", key.replace('_', "-"))))
    }

    /// Relative paths are taken from the data directory when one is set.
    pub fn path(&self, p: PathBuf) -> PathBuf {
        match &self.data_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p,
        }
    }

    pub fn need_path(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf, Failure> {
        Ok(self.path(self.need(flag, key)?))
    }

    pub fn opt_path(&self, flag: Option<PathBuf>, key: &str) -> Result<Option<PathBuf>, Failure> {
        Ok(self.opt(flag, key)?.map(|p| self.path(p)))
    }

    /// A whole config table, for structured settings such as the
    /// experiment grid.
    pub fn section_table(&self) -> Option<&toml::Table> {
        self.table.get(self.section).and_then(|t| t.as_table())
    }
}

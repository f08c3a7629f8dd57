//! Flat `key = value` configuration files.

use anyhow::{anyhow, bail, Context, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !allowed.contains(&k) {
                bail!("line {}: unknown key '{k}' (allowed: {})", i + 1, allowed.join(", "));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                bail!("line {}: duplicate key '{k}'", i + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text, allowed).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    fn raw<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key '{key}' = '{v}': {e}")))
            .transpose()
    }

    /// Command-line value, else config value, else `default`.
    pub fn get<T: FromStr>(&self, key: &str, cli: Option<T>, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match cli {
            Some(v) => Ok(v),
            None => Ok(self.raw(key)?.unwrap_or(default)),
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str, cli: Option<T>) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match cli {
            Some(v) => Ok(Some(v)),
            None => self.raw(key),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str, cli: Option<Vec<T>>, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = cli {
            return Ok(v);
        }
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<T>().map_err(|e| anyhow!("config key '{key}' item '{s}': {e}")))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_prefers_cli() {
        let s = Settings::parse("# comment\nagents = 2,4 \nseed=9 # trailing\n\n", &["agents", "seed"]).unwrap();
        assert_eq!(s.get("seed", None, 0u64).unwrap(), 9);
        assert_eq!(s.get("seed", Some(3u64), 0).unwrap(), 3);
        assert_eq!(s.get_list("agents", None, vec![1usize]).unwrap(), vec![2, 4]);
        assert_eq!(s.get("missing", None, 5u32).unwrap(), 5);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(Settings::parse("bogus = 1", &["seed"]).is_err());
        assert!(Settings::parse("seed = 1\nseed = 2", &["seed"]).is_err());
        assert!(Settings::parse("seed", &["seed"]).is_err());
        let s = Settings::parse("seed = x", &["seed"]).unwrap();
        assert!(s.get("seed", None, 0u64).is_err());
    }
}

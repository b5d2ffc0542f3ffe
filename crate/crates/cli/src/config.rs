//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use drcsd::data::DEFAULT_RATIOS;
use drcsd::decouple::EntryValues;
use drcsd::model::{HiddenRule, Mode};
use drcsd::train::TrainConfig;

/// Every recognised key with its default ("" means unset).
const KEYS: &[(&str, &str)] = &[
    ("input", ""),
    ("format", "tsv"),
    ("skip_header", "false"),
    ("ratios", "0.7,0.1,0.2"),
    ("noise_ratio", "0"),
    ("split", ""),
    ("dataset", ""),
    ("checkpoint", ""),
    ("k", "20"),
    ("phase", "test"),
    ("axis", ""),
    ("values", ""),
    ("seeds", ""),
    ("modes", "full,no_denoise,no_decouple"),
    ("d", "64"),
    ("batch_size", "2048"),
    ("layers", "2"),
    ("learning_rate", "0.001"),
    ("beta", "0.4"),
    ("lambda", "0.0001"),
    ("tau", "0.5"),
    ("hard", "false"),
    ("hidden", "per_order"),
    ("patience", "10"),
    ("max_epochs", "500"),
    ("mode", "full"),
    ("cap", ""),
    ("entry_values", "walk_counts"),
    ("init_std", "0.01"),
    ("log_seconds", "true"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        if !known(&key) {
            bail!("unknown config key {key:?}");
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    /// Applies `--key value` pairs (or `--key=value`).
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| anyhow!("expected --key value, found {arg:?}"))?;
            match flag.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it.next().ok_or_else(|| anyhow!("--{flag} needs a value"))?;
                    self.set(flag, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.get(key)).filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.opt(key).ok_or_else(|| anyhow!("missing required setting --{}", key.replace('_', "-")))
    }

    pub fn parse<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse().map_err(|e| anyhow!("invalid {key} = {raw:?}: {e}"))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    pub fn list<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow!("invalid entry {s:?} in {key}: {e}")))
            .collect()
    }

    pub fn ratios(&self) -> Result<[f64; 3]> {
        let r: Vec<f64> = self.list("ratios")?;
        match r.as_slice() {
            [] => Ok(DEFAULT_RATIOS),
            &[a, b, c] => Ok([a, b, c]),
            _ => bail!("ratios needs three comma-separated values"),
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cap = match self.opt("cap") {
            None => None,
            Some(v) => Some(v.parse().map_err(|e| anyhow!("invalid cap = {v:?}: {e}"))?),
        };
        let cfg = TrainConfig {
            d: self.parse("d")?,
            batch_size: self.parse("batch_size")?,
            layers: self.parse("layers")?,
            learning_rate: self.parse("learning_rate")?,
            beta: self.parse("beta")?,
            lambda: self.parse("lambda")?,
            tau: self.parse("tau")?,
            hard: self.parse("hard")?,
            hidden: self.parse::<HiddenRule>("hidden")?,
            patience: self.parse("patience")?,
            max_epochs: self.parse("max_epochs")?,
            seed,
            mode: self.parse::<Mode>("mode")?,
            cap,
            values: self.parse::<EntryValues>("entry_values")?,
            eval_k: self.parse("k")?,
            init_std: self.parse("init_std")?,
            log_seconds: self.parse("log_seconds")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sorted `key = value` lines, unset keys omitted.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.txt");
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

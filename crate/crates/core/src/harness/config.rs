//! Flat `key = value` configuration files.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    = blank | comment | entry
//! comment = "#" any*
//! entry   = key ws* "=" ws* value ws* [comment]
//! key     = [a-z0-9_]+
//! ```
//!
//! Keys are unique within a file. Values are plain scalars or
//! comma-separated lists of integers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsFormat;
use crate::error::{Error, Result};
use crate::experiments::ExperimentConfig;

/// Parse config text into an ordered key → value map.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let valid = !key.is_empty()
            && key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
        if !valid {
            return Err(Error::Config(format!("line {}: invalid key `{key}`", lineno + 1)));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("line {}: `{key}` has no value", lineno + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Everything a preset needs, with defaults for every key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub experiment: ExperimentConfig,
    /// Seeds per ablation table; rows report the per-variant median.
    pub ablation_seeds: usize,
    pub sweep_sources: Vec<usize>,
    pub sweep_targets: Vec<usize>,
    pub curriculum_short_epochs: usize,
    pub curriculum_long_epochs: usize,
    pub cost_budget_gb: f64,
    pub cost_bytes_per_value: usize,
    pub cost_local_batch: usize,
    #[serde(skip)]
    pub metrics_format: Option<MetricsFormat>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            experiment: ExperimentConfig::default(),
            ablation_seeds: 1,
            sweep_sources: vec![2, 4, 8],
            sweep_targets: vec![16],
            curriculum_short_epochs: 1,
            curriculum_long_epochs: 3,
            cost_budget_gb: 16.0,
            cost_bytes_per_value: 2,
            cost_local_batch: 1,
            metrics_format: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl HarnessConfig {
    pub fn format(&self) -> MetricsFormat {
        self.metrics_format.unwrap_or(MetricsFormat::Csv)
    }

    /// Apply one entry; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.experiment;
        match key {
            "seed" => e.seed = parse(key, value)?,
            "ablation_seeds" => self.ablation_seeds = parse(key, value)?,
            "metrics_format" => self.metrics_format = Some(value.parse()?),
            "stage1_frames" => e.stage1_frames = parse(key, value)?,
            "target_frames" => e.target_frames = parse(key, value)?,
            "stage1_epochs" => e.stage1.epochs = parse(key, value)?,
            "stage2_epochs" => e.stage2.epochs = parse(key, value)?,
            "base_lr" => {
                e.stage1.base_lr = parse(key, value)?;
                e.stage2.base_lr = e.stage1.base_lr;
            }
            "momentum" => {
                e.stage1.momentum = parse(key, value)?;
                e.stage2.momentum = e.stage1.momentum;
            }
            "warmup_epochs" => {
                e.stage1.warmup_epochs = parse(key, value)?;
                e.stage2.warmup_epochs = e.stage1.warmup_epochs;
            }
            "local_batch" => {
                e.stage1.local_batch = parse(key, value)?;
                e.stage2.local_batch = e.stage1.local_batch;
            }
            "label_smoothing" => {
                e.stage1.label_smoothing = parse(key, value)?;
                e.stage2.label_smoothing = e.stage1.label_smoothing;
            }
            "eval_every" => {
                e.stage1.eval_every = parse(key, value)?;
                e.stage2.eval_every = e.stage1.eval_every;
            }
            "eval_batch" => {
                e.stage1.eval_batch = parse(key, value)?;
                e.stage2.eval_batch = e.stage1.eval_batch;
            }
            "image_steps" => e.image.steps = parse(key, value)?,
            "image_lr" => e.image.lr = parse(key, value)?,
            "image_batch" => e.image.batch = parse(key, value)?,
            "image_grid" => e.image.grid = parse(key, value)?,
            "data_seed" => e.data.seed = parse(key, value)?,
            "train_per_class" => e.data.train_per_class = parse(key, value)?,
            "eval_per_class" => e.data.eval_per_class = parse(key, value)?,
            "noise_std" => e.data.noise_std = parse(key, value)?,
            "spatial_depth" => e.model.spatial_depth = parse(key, value)?,
            "temporal_depth" => e.model.temporal_depth = parse(key, value)?,
            "hidden" => e.model.hidden = parse(key, value)?,
            "heads" => e.model.heads = parse(key, value)?,
            "mlp_dim" => e.model.mlp_dim = parse(key, value)?,
            "adapter_hidden" => e.model.adapter_hidden = parse(key, value)?,
            "sweep_sources" => self.sweep_sources = parse_list(key, value)?,
            "sweep_targets" => self.sweep_targets = parse_list(key, value)?,
            "curriculum_short_epochs" => self.curriculum_short_epochs = parse(key, value)?,
            "curriculum_long_epochs" => self.curriculum_long_epochs = parse(key, value)?,
            "cost_budget_gb" => self.cost_budget_gb = parse(key, value)?,
            "cost_bytes_per_value" => self.cost_bytes_per_value = parse(key, value)?,
            "cost_local_batch" => self.cost_local_batch = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<()> {
        entries.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.model.validate()?;
        e.data.validate()?;
        e.stage1.validate()?;
        e.stage2.validate()?;
        for &t in [e.stage1_frames, e.target_frames]
            .iter()
            .chain(&self.sweep_sources)
            .chain(&self.sweep_targets)
        {
            e.data.frame_indices(t)?;
        }
        if self.ablation_seeds == 0 {
            return Err(Error::Config("ablation_seeds must be at least 1".into()));
        }
        if !(self.cost_budget_gb > 0.0) || self.cost_bytes_per_value == 0 || self.cost_local_batch == 0 {
            return Err(Error::Config("cost settings must be positive".into()));
        }
        Ok(())
    }

    /// Stable hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar() {
        let text = "# comment\n\nseed = 3   # trailing\nsweep_sources = 2, 4,8\n";
        let map = parse_config(text).unwrap();
        assert_eq!(map["seed"], "3");
        assert_eq!(map["sweep_sources"], "2, 4,8");
        let mut c = HarnessConfig::default();
        c.apply(&map).unwrap();
        assert_eq!(c.experiment.seed, 3);
        assert_eq!(c.sweep_sources, [2, 4, 8]);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_config("seed 3").is_err());
        assert!(parse_config("Seed = 3").is_err());
        assert!(parse_config("seed =").is_err());
        assert!(parse_config("seed = 1\nseed = 2").is_err());
        let mut c = HarnessConfig::default();
        assert!(c.set("no_such_key", "1").is_err());
        assert!(c.set("seed", "x").is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = HarnessConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "9").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}

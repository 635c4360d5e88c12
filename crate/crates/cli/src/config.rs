//! Config files and their merge with command-line flags.
//!
//! A config file is TOML. Top-level keys are flag names with `-` replaced by
//! `_` (`rank = 20`, `phi = "top2"`, `sizes = [100, 500]`); the tables
//! `[train]` and `[sobol]` tune probe training and mask sampling. Values
//! given as flags replace values from the file, key by key.

use std::path::Path;

use latent_audit::sobol::{SobolConfig, DEFAULT_MASKS, DEFAULT_MAX_INSTANCES};
use latent_audit::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Invalid;

/// Probe-training overrides; unset keys keep the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr_grid: Option<Vec<f64>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub hidden: Option<usize>,
    pub patience: Option<usize>,
}

impl TrainSection {
    pub fn resolve(section: Option<&TrainSection>, seed: u64) -> Result<TrainConfig, Invalid> {
        let s = section.cloned().unwrap_or_default();
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr_grid: s.lr_grid.unwrap_or(d.lr_grid),
            epochs: s.epochs.unwrap_or(d.epochs),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            hidden: s.hidden.unwrap_or(d.hidden),
            patience: s.patience.unwrap_or(d.patience),
            seed,
            ..d
        };
        cfg.validate().map_err(Invalid::from)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SobolSection {
    pub masks: Option<usize>,
    pub max_instances: Option<usize>,
    pub baseline: Option<f64>,
}

impl SobolSection {
    /// `masks` from a flag takes precedence over the table.
    pub fn resolve(section: Option<&SobolSection>, masks: Option<usize>, seed: u64) -> Result<SobolConfig, Invalid> {
        let s = section.cloned().unwrap_or_default();
        let n_masks = masks.or(s.masks).unwrap_or(DEFAULT_MASKS);
        if !n_masks.is_power_of_two() {
            return Err(Invalid(format!("--masks must be a power of two, got {n_masks}")));
        }
        Ok(SobolConfig {
            n_masks,
            seed,
            max_instances: s.max_instances.unwrap_or(DEFAULT_MAX_INSTANCES),
            baseline: s.baseline.unwrap_or(0.0),
            ..SobolConfig::default()
        })
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o.into_iter().filter(|(_, v)| !v.is_null()) {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_file(path: &Path) -> Result<Value, Invalid> {
    let text = std::fs::read_to_string(path).map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
    serde_json::to_value(table).map_err(|e| Invalid(format!("config {}: {e}", path.display())))
}

/// Lays the flags that were given over the config file, if any, and reads
/// the result back as the flag struct. Keys the command does not know are
/// rejected.
pub fn merged<T: Serialize + DeserializeOwned>(flags: &T, file: Option<&Path>) -> Result<T, Invalid> {
    let flags = serde_json::to_value(flags).map_err(|e| Invalid(e.to_string()))?;
    let Some(path) = file else {
        return serde_json::from_value(flags).map_err(|e| Invalid(e.to_string()));
    };
    let mut value = read_file(path)?;
    merge(&mut value, flags);
    serde_json::from_value(value).map_err(|e| Invalid(format!("config {}: {e}", path.display())))
}

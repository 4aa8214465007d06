//! Run configuration for `impute train`.
//!
//! Layers, lowest first: built-in defaults, `MIST_SEED`, the JSON config
//! file, command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use impute_core::networks::ArchConfig;
use impute_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SEED_ENV: &str = "MIST_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory (generated layout or foreign PGM folders).
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and the loss log.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub iterations: Option<u64>,
}

/// Recursively overlays `top` onto `base`; objects merge key by key.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, env_seed: Option<u64>, flags: &Overrides) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(seed) = env_seed {
            value["train"]["seed"] = seed.into();
        }
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let parsed: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if !parsed.is_object() {
                return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
            }
            merge(&mut value, parsed);
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| {
            let origin = file.map_or_else(|| "config".to_string(), |p| p.display().to_string());
            CliError::Usage(format!("{origin}: {e}"))
        })?;
        if let Some(d) = &flags.data {
            cfg.paths.data = Some(d.clone());
        }
        if let Some(o) = &flags.out {
            cfg.paths.out = Some(o.clone());
        }
        if let Some(s) = flags.seed {
            cfg.train.seed = s;
        }
        if let Some(i) = flags.iterations {
            cfg.train.iterations = i;
        }
        cfg.arch.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

//! Effective run settings: a JSON file merged with command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stemnet_core::phantom::{FusionSpec, PhantomSpec};
use stemnet_core::train::TrainConfig;
use stemnet_core::unet::UNetConfig;

use crate::dataset::DEFAULT_SPLIT;
use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const SIDECAR: &str = "effective_config.json";
pub const THREADS_ENV: &str = "STEMNET_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub v: u32,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub fusion: FusionSpec,
    /// Train:val:test proportions for generated cohorts.
    pub split: [u32; 3],
    /// Zero the per-epoch seconds column so logs are reproducible.
    pub deterministic: bool,
    /// Worker threads; `None` defers to the environment.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            v: SCHEMA_VERSION,
            unet: UNetConfig::default(),
            train: TrainConfig::default(),
            phantom: PhantomSpec::default(),
            fusion: FusionSpec::default(),
            split: DEFAULT_SPLIT,
            deterministic: false,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let c: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if c.v != SCHEMA_VERSION {
            return Err(CliError::Config(format!("config schema version {} (expected {SCHEMA_VERSION})", c.v)));
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        self.fusion.validate()?;
        if self.split.iter().sum::<u32>() == 0 {
            return Err(CliError::Config("split proportions must not all be zero".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("thread count must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the sidecar into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SIDECAR);
        fs::write(&path, self.to_json()).map_err(|e| CliError::io(&path, e))
    }
}

/// `--threads`, else `STEMNET_THREADS`, else the configured value.
pub fn resolve_threads(flag: Option<usize>, configured: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        _ => Ok(configured),
    }
}

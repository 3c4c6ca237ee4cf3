//! Run manifest: config, config hash, per-command artifacts and times.

use std::collections::BTreeMap;
use std::fs;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::store::{write_atomic, Layout};

pub const RUN_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerRecord {
    pub bridge_steps: usize,
    pub sampler_mode: String,
    pub t_prior: usize,
    pub refine_mode: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub sampler: SamplerRecord,
    pub config: ExperimentConfig,
    pub commands: BTreeMap<String, CommandRecord>,
}

/// Seconds since the epoch; `SOURCE_DATE_EPOCH` overrides the clock so
/// manifests can be reproduced byte for byte.
pub fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
    {
        return v;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            format: RUN_FORMAT,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: format!("{:016x}", config.hash()),
            sampler: SamplerRecord {
                bridge_steps: config.bridge_n_steps,
                sampler_mode: serde_json::to_value(config.sampler_mode)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                t_prior: config.refine_t_prior,
                refine_mode: match config.refine_ddim_steps {
                    0 => "ancestral".into(),
                    k => format!("ddim{k}"),
                },
            },
            config: config.clone(),
            commands: BTreeMap::new(),
        }
    }

    /// Records a finished command. Records from a run with a different
    /// config are dropped, since their artifacts may be stale.
    pub fn record(
        layout: &Layout,
        config: &ExperimentConfig,
        command: &str,
        record: CommandRecord,
    ) -> Result<()> {
        let path = layout.path(Layout::RUN_MANIFEST);
        let mut manifest = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .filter(|m| m.config_hash == format!("{:016x}", config.hash()))
            .unwrap_or_else(|| RunManifest::new(config));
        manifest.config = config.clone();
        for a in &record.artifacts {
            if !layout.path(a).exists() {
                bail!("artifact {a} listed for {command} does not exist");
            }
        }
        manifest.commands.insert(command.to_string(), record);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }

    pub fn load(layout: &Layout) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(
            layout.path(Layout::RUN_MANIFEST),
        )?)?)
    }
}

//! Run manifests: everything needed to re-execute a command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Metrics and files of one processed item. Non-finite metrics (PSNR of
/// identical images) are stored as `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Unix seconds; `None` in deterministic mode.
    pub started_unix: Option<u64>,
    pub finished_unix: Option<u64>,
    pub config: RunConfig,
    pub metrics: BTreeMap<String, f64>,
    pub items: Vec<ItemRecord>,
    pub outputs: Vec<PathBuf>,
}

fn now(deterministic: bool) -> Option<u64> {
    if deterministic {
        return None;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig, deterministic: bool) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed: config.seed,
            deterministic,
            started_unix: now(deterministic),
            finished_unix: None,
            config: config.clone(),
            metrics: BTreeMap::new(),
            items: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn path_for(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("{command}_manifest.json"))
    }

    /// Writes `<command>_manifest.json` and `<command>_config.toml` into the
    /// output directory and returns the manifest path.
    pub fn finish(&mut self) -> Result<PathBuf> {
        self.finished_unix = now(self.deterministic);
        let dir = &self.config.paths.output;
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let toml_path = dir.join(format!("{}_config.toml", self.command));
        fs::write(&toml_path, self.config.to_toml()).map_err(|e| CliError::io(&toml_path, e))?;
        let path = Self::path_for(dir, &self.command);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_manifest_has_no_timestamps_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::desk();
        cfg.paths.output = dir.path().to_path_buf();
        let mut m = RunManifest::start("sample", &cfg, true);
        m.metrics.insert("psnr".into(), 21.5);
        m.items.push(ItemRecord {
            name: "0000".into(),
            seed: 3,
            label: Some("guided".into()),
            metrics: [("psnr".to_string(), 20.0)].into(),
            outputs: vec![PathBuf::from("a.png")],
        });
        let path = m.finish().unwrap();
        assert_eq!(m.started_unix, None);
        assert_eq!(m.finished_unix, None);
        assert_eq!(RunManifest::load(&path).unwrap(), m);
        let toml: RunConfig =
            toml::from_str(&fs::read_to_string(dir.path().join("sample_config.toml")).unwrap()).unwrap();
        assert_eq!(toml, cfg);
    }

    #[test]
    fn timestamps_are_recorded_otherwise() {
        let m = RunManifest::start("train", &RunConfig::base(), false);
        assert!(m.started_unix.is_some());
    }
}

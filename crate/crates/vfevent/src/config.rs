//! Run configuration: a TOML file with documented defaults, overridden by
//! `--override key=value` flags, echoed back as a provenance JSON so any run
//! is reconstructible from that file alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::imaginator::ImaginatorConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Working image resolution (square).
    pub resolution: usize,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Visual mode for single-mode commands (train provenance, infer).
    pub mode: String,
    /// Visual modes for the eval grid.
    pub modes: Vec<String>,
    pub include_none: bool,
    pub encoder: EncoderConfig,
    pub imaginator: ImaginatorConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            image_root: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            resolution: 32,
            shots: vec![5, 10, 15, 20],
            seeds: vec![0],
            mode: "imagine".to_string(),
            modes: vec!["imagine".to_string()],
            include_none: false,
            encoder: EncoderConfig::default(),
            imaginator: ImaginatorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Load from an optional TOML file, then apply `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = match path {
            Some(p) => {
                let raw = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?;
                raw.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("parsing {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        // Fill defaults by deserializing the (possibly sparse) table.
        let config: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if let Some(ds) = &self.dataset {
            if !ds.is_file() {
                return Err(Error::Config(format!("dataset {} not found", ds.display())));
            }
        }
        Ok(())
    }

    pub fn require_dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset configured".into()))
    }

    /// Echo the fully-resolved config as the provenance record.
    pub fn write_provenance(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing provenance: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }
}

/// Apply one `a.b.c=value` override to a TOML table, creating intermediate
/// tables as needed. The value is parsed as a TOML literal, falling back to
/// a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' must be key=value")))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}' crosses a non-table value")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

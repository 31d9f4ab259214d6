//! Layered training configuration and run provenance records.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lowshot_core::trainer::TrainConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::invalid;

/// Reads a TOML file whose keys mirror [`TrainConfig`]. Missing keys keep
/// their defaults.
pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
}

/// Command-line overrides, applied on top of the file.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct TrainOverrides {
    /// Seed for initialization, batch order and jitter
    #[arg(long)]
    pub seed: Option<u64>,
    /// Phase-1 iterations
    #[arg(long)]
    pub phase1_iterations: Option<usize>,
    /// Phase-2 iterations
    #[arg(long)]
    pub phase2_iterations: Option<usize>,
    /// Phase-1 learning rate
    #[arg(long)]
    pub phase1_lr: Option<f64>,
    /// Phase-2 learning rate
    #[arg(long)]
    pub phase2_lr: Option<f64>,
    /// Images per batch (N)
    #[arg(long)]
    pub images_per_batch: Option<usize>,
    /// Boxes sampled per image (M)
    #[arg(long)]
    pub boxes_per_image: Option<usize>,
    /// Draw weight of shot images relative to base images in phase 2
    #[arg(long)]
    pub novel_oversampling: Option<f64>,
    /// Keep imprinted novel rows fixed in phase 2
    #[arg(long)]
    pub freeze_imprinted: bool,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.phase1_iterations {
            cfg.phase1_iterations = v;
        }
        if let Some(v) = self.phase2_iterations {
            cfg.phase2_iterations = v;
        }
        if let Some(v) = self.phase1_lr {
            cfg.phase1_lr = v;
        }
        if let Some(v) = self.phase2_lr {
            cfg.phase2_lr = v;
        }
        if let Some(v) = self.images_per_batch {
            cfg.images_per_batch = v;
        }
        if let Some(v) = self.boxes_per_image {
            cfg.sampler.boxes_per_image = v;
        }
        if let Some(v) = self.novel_oversampling {
            cfg.novel_oversampling = v;
        }
        if self.freeze_imprinted {
            cfg.freeze_imprinted = true;
        }
    }
}

/// Effective configuration as TOML, falling back to JSON for values TOML
/// cannot express.
pub fn describe(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).unwrap_or_else(|_| serde_json::to_string_pretty(cfg).expect("config serializes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: Option<u64>,
    single_thread: bool,
    config_sha256: String,
    config: serde_json::Value,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

/// Provenance written as `run.json` in the output directory.
pub struct RunLog {
    pub subcommand: &'static str,
    pub seed: Option<u64>,
    pub single_thread: bool,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunLog {
    pub fn new(subcommand: &'static str, single_thread: bool) -> Self {
        RunLog {
            subcommand,
            seed: None,
            single_thread,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let config_text = serde_json::to_string(&self.config)?;
        let inputs = self
            .inputs
            .iter()
            .map(|p| Ok(InputRecord { path: p.display().to_string(), sha256: file_sha256(p)? }))
            .collect::<Result<_>>()?;
        let record = RunRecord {
            tool: "lowshot",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            seed: self.seed,
            single_thread: self.single_thread,
            config_sha256: sha256_hex(config_text.as_bytes()),
            config: self.config.clone(),
            inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let path = dir.join("run.json");
        fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

//! Checkpoints: `model.safetensors` plus `meta.json` in one directory.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::EvalSummary;
use crate::error::{KadError, Result};
use crate::losses::{LossReport, LossWeights};
use crate::model::KadModel;

pub const WEIGHTS: &str = "model.safetensors";
pub const META: &str = "meta.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean of the step reports.
    pub mean: LossReport,
    pub val: Option<EvalSummary>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub config: RunConfig,
    pub history: Vec<EpochRecord>,
}

impl CheckpointMeta {
    pub fn new(config: RunConfig, epoch: usize, step: usize, history: Vec<EpochRecord>) -> Self {
        CheckpointMeta {
            format: FORMAT,
            epoch,
            step,
            seed: config.seed,
            loss_weights: config.loss,
            config,
            history,
        }
    }
}

/// Writes into a sibling temp directory and swaps it in, so a reader never
/// sees weights and metadata from different epochs.
pub fn save_checkpoint(model: &KadModel, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| KadError::Config(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy();
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{name}.tmp"));
    let old = parent.join(format!(".{name}.old"));
    for p in [&tmp, &old] {
        if p.exists() {
            fs::remove_dir_all(p)?;
        }
    }
    fs::create_dir_all(&tmp)?;
    model.store().save(&tmp.join(WEIGHTS))?;
    fs::write(tmp.join(META), serde_json::to_string_pretty(meta)?)?;
    if dir.exists() {
        fs::rename(dir, &old)?;
    }
    fs::rename(&tmp, dir)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| KadError::load(&path, e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| KadError::load(&path, e.to_string()))?;
    if meta.format != FORMAT {
        return Err(KadError::load(&path, format!("unsupported checkpoint format {}", meta.format)));
    }
    Ok(meta)
}

/// Rebuilds the model from the stored config and overwrites its parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(KadModel, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let model = KadModel::new(&meta.config.model, meta.seed, DType::F32, &Device::Cpu)?;
    model.store().load(&dir.join(WEIGHTS))?;
    Ok((model, meta))
}
